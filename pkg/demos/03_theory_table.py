"""The closed-form predictions, with the published figures they disagree with.

Run: python3 demos/03_theory_table.py
"""
from ftdba.theory import TheoryInputs, min_poison_formula, sample_ratio, theory_csv, theory_table

print(theory_csv(theory_table(TheoryInputs())))

ratio, gamma = sample_ratio(16, 0.8, 1.26)
n_dba, n_ft = min_poison_formula(0.9, 1000, 1, 16, 0.8, 1.26)
print(f"sample ratio {ratio:.4f} (gamma {gamma:.5f})")
print(f"minimum poison: block {n_dba:.1f}, fractal {n_ft:.2f}, ratio {n_ft / n_dba:.4f}")
for d in (1.0, 1.26, 1.5):
    print(f"D = {d}: gamma {sample_ratio(16, 0.8, d)[1]:.4f}")
