"""Numerical identifiability: are the derivative families linearly independent?

Linear experts satisfy a PDE linking the gating and expert derivatives, so the
strong family degenerates; the weak (first-order) family stays independent.
The probe reports the smallest singular value of the column-normalised family.
"""
from sigmoe.identifiability import check_pde_identities, probe, random_atom
from sigmoe.model import ExpertSpec, ScoreKind
from sigmoe.streams import generator

cases = [
    ("strong", ExpertSpec.linear(2), 1),
    ("weak", ExpertSpec.linear(2), 2),
    ("weak", ExpertSpec.polynomial(2, 2), 2),
    ("weak", ExpertSpec.ridge(2, "gelu"), 2),
    ("partial-weak", ExpertSpec.ridge(2, "relu"), 2),
]
for mode, spec, atoms in cases:
    rep = probe(mode, spec, atoms, generator(0, "probe"))
    print(f"{mode:13s} {spec.family:10s} atoms={atoms}: sigma_min={rep.min_singular_value:.2e} -> {rep.verdict.value}")

rng = generator(1, "misc")
spec = ExpertSpec.linear(3)
atom = random_atom(rng, spec, ScoreKind.FULL)
print("PDE residuals at a random point:", max(check_pde_identities(rng.uniform(-1, 1, 3), atom, spec)))
