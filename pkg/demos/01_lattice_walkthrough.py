#!/usr/bin/env python3
"""Decode one hand-made utterance with the mismatch lattice.

No training is involved: we write down per-frame phoneme posteriors by hand,
plant one mispronunciation, and watch the joint decoder flag it while plain
forced alignment cannot.
"""

import numpy as np

from mlvae import lattice
from mlvae.models.mlvae import Posteriors

symbols = [str(d) for d in range(10)]
prior = np.full(10, 0.1)

# the speaker was asked to say "3 1 4" but said "3 7 4"
C = [3, 1, 4]
spoken = [3] * 6 + [7] * 5 + [4] * 7
T = len(spoken)

# a confident recogniser: 0.91 on the spoken digit, the rest spread evenly
qy = np.full((T, 10), 0.01)
qy[np.arange(T), spoken] = 0.91
# the boundary detector fires where the spoken digit changes
q_b1 = np.full(T, 0.05)
q_b1[[6, 11]] = 0.8
# correctness head: mildly suspicious of frames that do not look like any label in C
log_qpi = np.log(np.tile([0.85, 0.15], (T, 1)))
log_qpi[6:11] = np.log([0.3, 0.7])
post = Posteriors(np.log(qy), q_b1, np.ones(T), np.ones(T), log_qpi)

fsa = lattice.build_sentence_fsa(C)
print(f"sentence acceptor: {fsa.num_states} states, {len(fsa.arcs)} arcs, {fsa.num_lanes} lanes")

# joint decoding over boundaries and correctness
res = lattice.decode_posteriors(post, C, prior)
print("\njoint decoding")
for seg in res.localization(C).segments:
    print(f"  {symbols[seg.phoneme]}  frames {seg.start:2d}-{seg.end:2d}  {'MISMATCH' if seg.mismatch else 'ok'}")
print(f"  log score {res.log_score:.3f}")

# the chosen path frame by frame
print("\n" + lattice.dump_trellis(res, symbols, C))

# forced alignment only knows C, so it can place segments but never flags anything
fa = lattice.fa_localize_posteriors(post, C, prior)
print("\nforced alignment:", [(s.start, s.end, s.mismatch) for s in fa.segments])

# two-pass: recognise freely, then compare with C by edit distance
tp = lattice.two_pass_from_posteriors(post, C, prior)
print("two-pass:        ", [(s.start, s.end, s.mismatch) for s in tp.segments])

# a repeated digit is where two-pass struggles: "5 5" collapses to a single 5
C2 = [2, 5, 5]
spoken2 = [2] * 5 + [5] * 12
qy2 = np.full((len(spoken2), 10), 0.01)
qy2[np.arange(len(spoken2)), spoken2] = 0.91
post2 = Posteriors(np.log(qy2), np.full(len(spoken2), 0.08), None, None, np.log(np.tile([0.85, 0.15], (17, 1))))
print("\nrepeated digits, two-pass flags:", [s.mismatch for s in lattice.two_pass_from_posteriors(post2, C2, prior).segments])
print("repeated digits, joint flags:   ",
      [s.mismatch for s in lattice.decode_posteriors(post2, C2, prior).localization(C2).segments])
