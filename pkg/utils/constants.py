from typing import Final

# Below this, (mu + q)^gamma is evaluated through the zero branch instead of
# exp/log so negative gammas never see log(0).
TINY_SQUARED_NORM: Final = 1e-300

# Absolute tolerance for the adaptive quadrature behind the shifted N-functions.
QUAD_ABS_TOL: Final = 1e-10
ROOT_TOL: Final = 1e-12

# Hard audit checks compare with this relative slack.
AUDIT_REL_TOL: Final = 1e-10
POLAR_IDENTITY_TOL: Final = 1e-8

# Gaussian sample scales for random symmetric matrices.
SAMPLE_SCALES: Final = (1e-3, 1.0, 1e3)

DEFAULT_L_SCHEDULE: Final = (1.0, 10.0, 100.0, 1000.0, float("inf"))

# Direct sparse factorization up to this many dofs, preconditioned CG above.
DIRECT_SOLVE_MAX_DOFS: Final = 200_000

# A ball must be at least this many mesh spacings wide in radius.
BALL_GUARD_SPACINGS: Final = 4.0

EXCESS_FLOOR: Final = 1e-14

# Scale-free singular-flag defaults, relative to domain averages.
OSCILLATION_THRESHOLD_FACTOR: Final = 1e-2
DIVERGENCE_THRESHOLD_FACTOR: Final = 1e2

# Step of the fourth-order stencil in the manufactured divergence, in cell sizes.
MANUFACTURED_FD_STEP: Final = 1e-2

SNAPSHOT_FORMAT_VERSION: Final = 1
MANIFEST_NAME: Final = "manifest.json"

EXIT_UNEXPECTED: Final = 1
