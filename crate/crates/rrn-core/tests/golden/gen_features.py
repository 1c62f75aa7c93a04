#!/usr/bin/env python3
"""Generates golden_features.csv for the feature-extraction tests.

Computes the 19-component pairwise feature vector for every ordered pair of
the five-input configuration, straight from the definitions, with no shared
code with the Rust implementation.

Feature layout per ordered pair (A, B):
  [0:3]   A position (pixel space)
  [3:6]   spherical (r, theta, phi) of A - Me
  [6:9]   B position
  [9:12]  spherical of B - Me
  [12:15] Me position
  [15:18] spherical of B - A
  [18]    bounding-box diagonal of the mandibular input landmarks

Spherical convention: r = |v|, theta = acos(v_z / r) in [0, pi],
phi = atan2(v_y, v_x); the zero vector maps to (0, 0, 0).
"""

import json
import math
import os

HERE = os.path.dirname(os.path.abspath(__file__))

INPUTS = ["Me", "CdL", "CdR", "CorL", "CorR"]  # all mandibular


def spherical(v):
    r = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    if r == 0.0:
        return (0.0, 0.0, 0.0)
    theta = math.acos(max(-1.0, min(1.0, v[2] / r)))
    phi = math.atan2(v[1], v[0])
    if phi <= -math.pi:
        phi = math.pi
    return (r, theta, phi)


def sub(a, b):
    return [a[0] - b[0], a[1] - b[1], a[2] - b[2]]


def main():
    data = json.load(open(os.path.join(HERE, "fixture_subject.json")))
    subj = data["subjects"][0]
    lm = subj["landmarks"]

    lo = [min(lm[n][a] for n in INPUTS) for a in range(3)]
    hi = [max(lm[n][a] for n in INPUTS) for a in range(3)]
    d1 = math.sqrt(sum((hi[a] - lo[a]) ** 2 for a in range(3)))

    rows = []
    for a, b in sorted((a, b) for a in INPUTS for b in INPUTS if a != b):
        pa, pb, me = lm[a], lm[b], lm["Me"]
        f = []
        f += pa
        f += spherical(sub(pa, me))
        f += pb
        f += spherical(sub(pb, me))
        f += me
        f += spherical(sub(pb, pa))
        f.append(d1)
        assert len(f) == 19
        rows.append((subj["id"], a, b, f))

    out = os.path.join(HERE, "golden_features.csv")
    with open(out, "w") as fh:
        header = ",".join(["subject", "a", "b"] + [f"f{i}" for i in range(1, 20)])
        fh.write(header + "\n")
        for sid, a, b, f in rows:
            vals = ",".join(f"{v:.8e}" for v in f)
            fh.write(f"{sid},{a},{b},{vals}\n")
    print(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
