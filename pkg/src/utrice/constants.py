"""Numerical constants shared by the geometry, tracer and gradient code."""

# Triangles with squared-parallelogram area below this are degenerate and are
# excluded from tracing and gradient accumulation (world units squared).
AREA_EPS = 1e-12

# Ray-plane intersection guards.
PLANE_EPS = 1e-6
PARALLEL_EPS = 1e-9
T_MIN = 1e-4

# Compositing: terminate a ray once transmittance drops below T_TERM; cap
# alpha so transmittance never reaches exactly zero (which kills gradients).
T_TERM = 1e-3
ALPHA_MAX = 0.9999

# Hits with window response at or below this are skipped entirely.
RESPONSE_EPS = 1e-4

# Guard for log(phi(p)/phi(s)) in the smoothness gradient.
RATIO_EPS = 1e-6

# Default k-closest buffer capacity.
K_DEFAULT = 16

# Adam (moment decay rates and epsilon are fixed, not configurable).
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

# Smoothness is optimized raw with a positivity clamp.
SIGMA_MIN = 1e-3
