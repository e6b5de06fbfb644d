"""
Title: Rigid registration and the quality gate
Description: Misalign a synthetic PET, recover the motion, and gate the result.
"""

"""
Cases are only usable when PET and MRI line up. The gate combines normalized
mutual information with the Dice overlap of Otsu masks, both computed inside
the brain.
"""

import numpy as np

from fmisynth.phantom import PhantomSpec, generate_case
from fmisynth.regqc import RigidTransform, apply_rigid, qc_gate, rigid_register

case = generate_case(PhantomSpec(shape=(64, 64, 32), seed=5))
t2, pet, brain = case.channel("t2"), case.pet, case.brain_mask

"""
## Simulated head motion

A small rotation about the slice axis plus a shift of a few millimetres.
"""

motion = RigidTransform(rotations=(0.0, 0.0, 0.06), translations=(3.0, -2.0, 1.0))
moved = apply_rigid(pet, motion, pet.geometry)

before = qc_gate(moved, t2, brain)
print(f"before: nmi {before.nmi:.3f}  dice {before.dice:.3f}  -> {before.decision}")

"""
## Recovery

`rigid_register` searches the six parameters coarse to fine and only keeps
steps that raise NMI. The estimated transform maps the reference grid into the
moved image, so warping the moved image with it restores alignment.
"""

res = rigid_register(moved, t2, brain, return_result=True)
print("estimated:", np.round(res.transform.as_vector(), 3))
# the inverse of a rotation about z by a is a rotation by -a; its shift is -R^T t
inverse_shift = -motion.rotation_matrix().T @ np.asarray(motion.translations)
print("inverse:  ", np.round(np.r_[-np.asarray(motion.rotations), inverse_shift], 3))

restored = apply_rigid(moved, res.transform, t2.geometry)
after = qc_gate(restored, t2, brain)
print(f"after:  nmi {after.nmi:.3f}  dice {after.dice:.3f}  -> {after.decision}")
print("NMI per level:", [f"{lvl[0]:.3f}->{lvl[-1]:.3f}" for lvl in res.trace])
