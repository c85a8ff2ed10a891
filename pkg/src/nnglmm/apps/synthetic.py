"""Synthetic teacher/student data with a multiple-membership grade model and a
probit attendance model sharing the first-year teacher effects."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..families import Family
from ..model import Model, ParameterSet, RandomEffectsLayout, ResponseBlock, RKind, RStructure

TEACHER_COMPONENTS = ("grade1", "grade2", "attend")
DEFAULT_GAMMA = np.array([[0.3, 0.1, 0.1], [0.1, 0.2, 0.05], [0.1, 0.05, 0.3]])


def classroom_model(students, teachers1, teachers2, rng, gamma=DEFAULT_GAMMA, var_teacher2=0.2, var_student=0.5,
                    sigma2=0.5, means=(0.0, 0.3), attend_beta=0.5):
    """Return (model, true parameters).

    Every student has a first-year grade (first-year teacher effect on the
    grade plus a student effect). Attendance in the second year is a probit
    on the first-year teacher's attendance effect. Attending students get a
    second-year grade loading on the first-year teacher's persistence effect,
    the second-year teacher and the student, so classmates from different
    years are linked (multiple membership).
    """
    layout = RandomEffectsLayout.contiguous([
        ("teacher1", TEACHER_COMPONENTS, teachers1),
        ("teacher2", ("grade2",), teachers2),
        ("student", ("ability",), students),
    ])
    t1, t2, st = (g.index for g in layout.groups)
    u1 = rng.standard_normal((teachers1, 3)) @ np.linalg.cholesky(gamma).T
    u2 = rng.normal(0.0, np.sqrt(var_teacher2), teachers2)
    s = rng.normal(0.0, np.sqrt(var_student), students)
    first = rng.integers(0, teachers1, students)
    attend = (attend_beta + u1[first, 2] + rng.standard_normal(students) > 0).astype(float)
    who = np.flatnonzero(attend)
    second = rng.integers(0, teachers2, who.size)

    n1 = students + who.size
    rows = np.concatenate([np.arange(students), np.arange(students),
                           students + np.arange(who.size), students + np.arange(who.size), students + np.arange(who.size)])
    cols = np.concatenate([t1[first, 0], st[:, 0], t1[first[who], 1], t2[second, 0], st[who, 0]])
    Z1 = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n1, layout.m))
    X1 = np.zeros((n1, 2))
    X1[:students, 0] = 1.0
    X1[students:, 1] = 1.0
    y1 = np.concatenate([
        means[0] + u1[first, 0] + s,
        means[1] + u1[first[who], 1] + u2[second] + s[who],
    ]) + rng.normal(0.0, np.sqrt(sigma2), n1)
    Z2 = sp.csr_matrix((np.ones(students), (np.arange(students), t1[first, 2])), shape=(students, layout.m))
    blocks = [
        ResponseBlock("grade", Family.normal(), y1, X1, Z1),
        ResponseBlock("attend", Family.binary(), attend, np.ones((students, 1)), Z2),
    ]
    truth = ParameterSet({"grade": np.array(means, float), "attend": np.array([attend_beta])},
                         [np.array(gamma, float), np.array([[var_teacher2]]), np.array([[var_student]])],
                         {"grade": RStructure(RKind.IDENTITY, sigma2)})
    return Model(blocks, layout), truth
