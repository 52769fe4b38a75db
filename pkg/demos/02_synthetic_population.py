"""
A synthetic muscle population
=============================

Normal shapes are tapered, bent superellipsoids in two cohorts; every
subject is scanned three times with a small squash. Anomalous shapes take a
normal base, roughen its boundary, cut one to three notches and are
rescaled back to roughly the base volume: volume alone should not give them
away, surface irregularity should.
"""
import numpy as np

from shapeprior.synth import PopulationSpec, anomalous_with_base, gen_normal_shape, make_folds, population_subjects
from shapeprior.synth import surface_to_volume
from shapeprior.anomaly import roc_auc
from shapeprior.voxels import volume_cm3

spec = PopulationSpec(dims=(32, 32, 32), spacing=(3.0, 3.0, 3.0))

# three scans of one subject differ only by the squash
scans = [gen_normal_shape(spec, 4, s) for s in range(3)]
print("subject 4 volumes (cm^3):", [round(volume_cm3(g), 1) for g in scans])

# anomalies next to the normal shape they were made from
print("\nbase vs anomalous: volume, surface/volume")
for seed in range(10_000, 10_005):
    anom, base = anomalous_with_base(spec, seed, 0)
    print(f"  {volume_cm3(base):6.1f} {volume_cm3(anom):6.1f}   "
          f"{surface_to_volume(base):.3f} -> {surface_to_volume(anom):.3f}")

# volume is a poor detector on the whole population ...
normal = [volume_cm3(gen_normal_shape(spec, i, 0)) for i in range(25)]
anomalous = [volume_cm3(anomalous_with_base(spec, 10_000 + i, 0)[0]) for i in range(25)]
auc = roc_auc(normal, anomalous)
print("\nvolume means: normal %.1f, anomalous %.1f" % (np.mean(normal), np.mean(anomalous)))
print("volume-only AUC (better orientation): %.3f" % max(auc, 1 - auc))

# ... surface irregularity is the signal the prior has to pick up instead
sv_n = [surface_to_volume(gen_normal_shape(spec, i, 0)) for i in range(25)]
sv_a = [surface_to_volume(anomalous_with_base(spec, 10_000 + i, 0)[0]) for i in range(25)]
print("surface/volume AUC: %.3f" % (1 - roc_auc(sv_n, sv_a)))

# subject-wise folds: anomalous subjects are test-only in every fold
subjects = [(s.subject_id, s.group) for s in population_subjects(spec)]
plan = make_folds(subjects, k=5, seed=0)
for f, (tr, te) in enumerate(plan.folds):
    print(f"fold {f}: {len(tr)} train subjects, test = {sorted(te)}")
