"""How the softmin contact distance of a sampled sphere fingertip approaches the hard minimum.

Run with ``python3 demos/softmin_contact.py``.
"""

import numpy as np

from dexroll.body import FingerSamples, SampledBody, contact_estimate, surface_samples_of_primitive
from dexroll.geometry import ObjectPose, Primitive, SdfScene
from dexroll.kinematics import KinematicChain

chain = KinematicChain.from_dict({"fingers": [{"name": "f", "joints": [{"name": "j", "axis": [0, 0, 1], "limits": [-4, 4]}]}]})
box = SdfScene([Primitive.box([0.05, 0.05, 0.05])])
n = 512
# a 1 cm sphere whose surface is 2 mm from the +x face
pts = surface_samples_of_primitive(Primitive.sphere(0.01, position=[0.062, 0.0, 0.0]), n, seed=0)
body = SampledBody([FingerSamples(0, pts, np.zeros(n, dtype=int))])

print(f"{'delta':>8} {'softmin (mm)':>13} {'hard min (mm)':>14} {'gap (mm)':>9} {'log(N)/delta (mm)':>18}")
for delta in (10.0, 100.0, 1000.0, 1e4, 1e5):
    est = contact_estimate(body, 0, chain, [0.0], box, ObjectPose.identity(), delta)
    d, h = est.distance[0], est.hard_min[0]
    print(f"{delta:8.0f} {d * 1e3:13.4f} {h * 1e3:14.4f} {(d - h) * 1e3:9.4f} {np.log(n) / delta * 1e3:18.4f}")
print("contact normal at delta=1000:", np.round(contact_estimate(body, 0, chain, [0.0], box, ObjectPose.identity(), 1000.0).normal[0], 6))
