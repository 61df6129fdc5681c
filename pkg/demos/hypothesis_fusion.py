"""
Word confidences from N-best lists and ROVER voting
===================================================

Three hypotheses with posteriors 0.7, 0.2 and 0.1 are compacted into a
confusion network, written as CTM records, and several systems are then
combined by voting.
"""
import math

from dasrkit.fusion import (NBestList, RoverConfig, cn_to_ctm, format_ctm, hystoc_confusion_network,
                            posteriors_from_scores, rover, wer)

nb = NBestList("utt1", (("A B C".split(), math.log(0.7)),
                        ("A B".split(), math.log(0.2)),
                        ("A C".split(), math.log(0.1))))
post = posteriors_from_scores(nb, temperature=1.0)
cn = hystoc_confusion_network(nb.tokens, post)
for slot in cn.slots:
    print({w: round(c, 3) for w, c in slot.items()})
print(format_ctm(cn_to_ctm(cn, nb.utt_id)), end="")

# three systems; b and c tie, so the earlier system wins
systems = [[("a", 1.0), ("b", 1.0)], [("a", 1.0), ("c", 1.0)], [("a", 1.0)]]
fused = rover(systems, RoverConfig(alpha=0.8, null_conf=0.4))
print("fused:", " ".join(w for w, _ in fused))

r = wer("a b c".split(), "a x c d".split())
print(f"WER {r.wer:.3f}  S={r.substitutions} D={r.deletions} I={r.insertions}")
