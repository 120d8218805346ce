"""Tour of the attention patterns on a tiny query-document pair.

Run:  python demos/01_pattern_tour.py

Prints each preset as a character grid ('#' = may attend, '.' = masked)
and then the fraction of allowed pairs at realistic lengths.
"""

from qdst.pattern import PatternConfig, Preset, build_layout, build_pattern, pad_layout, sparsity, synthetic_layout

ROLE_CHAR = {0: "C", 1: "q", 2: "|", 3: "S", 4: "d", 5: "_"}


def show(pattern, layout):
    roles = "".join(ROLE_CHAR.get(int(r), "?") for r in layout.roles)
    print("   " + roles)
    grid = pattern.dense()
    for i, row in enumerate(grid):
        print(f"{roles[i]:>2} " + "".join("#" if x else "." for x in row))


# [CLS] two query tokens [SEP], then three short sentences, padded to 20
layout = pad_layout(build_layout([7, 8], [[20, 21, 22], [23, 24], [25, 26, 27, 28]]), 20)
print("roles: C=[CLS] q=query |=[SEP] S=[SOS] d=document _=PAD\n")

for preset in Preset:
    pat = build_pattern(layout, PatternConfig(4, preset))
    st = sparsity(pat)
    print(f"{preset.value}  (w=4, {st.nonzeros} of {st.total} pairs)")
    show(pat, layout)
    print()

# the local band stays linear in n while the globals add a few thin strips
print("fraction of allowed pairs, w=128, 10 query tokens, 25-token sentences")
print(f"{'n':>6}  " + "  ".join(f"{p.value:>13}" for p in Preset))
for n in (512, 1024, 2048):
    lay = synthetic_layout(n, query_len=10, sentence_len=25)
    fr = [sparsity(build_pattern(lay, PatternConfig(128, p))).fraction for p in Preset]
    print(f"{n:>6}  " + "  ".join(f"{f:>13.4f}" for f in fr))
