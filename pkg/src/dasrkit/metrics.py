"""Signal quality measures used to evaluate enhancement and augmentation."""
import numpy as np


def si_sdr(estimate, reference) -> float:
    """Scale-invariant signal-to-distortion ratio in dB."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    n = min(estimate.shape[-1], reference.shape[-1])
    estimate, reference = estimate[:n], reference[:n]
    estimate = estimate - estimate.mean()
    reference = reference - reference.mean()
    scale = np.dot(estimate, reference) / max(np.dot(reference, reference), 1e-20)
    target = scale * reference
    noise = estimate - target
    return float(10 * np.log10(max(np.dot(target, target), 1e-20)
                               / max(np.dot(noise, noise), 1e-20)))


def snr_db(signal, noise) -> float:
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    return float(10 * np.log10(np.mean(signal ** 2) / np.mean(noise ** 2)))


def segmental_snr(reference, estimate, frame: int = 256, floor_db: float = -10.0,
                  ceil_db: float = 35.0, min_energy: float = 1e-8) -> float:
    """Mean frame SNR with the usual [-10, 35] dB clamp; near-silent frames skipped."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    n = min(len(reference), len(estimate)) // frame * frame
    r = reference[:n].reshape(-1, frame)
    e = estimate[:n].reshape(-1, frame)
    sig = np.sum(r ** 2, axis=1)
    err = np.sum((r - e) ** 2, axis=1)
    keep = sig > min_energy * frame
    if not np.any(keep):
        return float("nan")
    seg = 10 * np.log10(sig[keep] / np.maximum(err[keep], 1e-20))
    return float(np.mean(np.clip(seg, floor_db, ceil_db)))
