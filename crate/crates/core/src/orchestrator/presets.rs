//! Built-in benchmark configurations.

/// Cantilever beam 2 × 1 clamped on the left, parabolic shear on the right
/// end with peak 1.
pub const EXAMPLE1: &str = r#"
name = "example1"
rho0 = 0.5
thresholds = [0.12, 0.88]
load_mode = "equilibrated"

[grid]
nx = 32
ny = 16
width = 2.0
height = 1.0
mask = { kind = "full" }

[material]
young = 1000.0
poisson = 0.3
rho_min = 0.001

[coarse]
penalty = 1.0
r_min = 1.5
eps = 0.03
max_inner = 200
max_stages = 50

[oc]
zeta = 0.2
eta = 0.5
vol_tol = 1e-9

[fine]
n = 32
penalty = 3.0
r_min = 1.3
eps = 0.01
max_iterations = 300

[projection]
beta0 = 1.0
beta_max = 2.0
mu = 0.5
m_nd_min = 50.0
every = 2

[[supports]]
side = "left"
from = 0.0
to = 1.0
fix = [true, true]

[[loads]]
side = "right"
from = 0.0
to = 1.0
profile = { kind = "parabolic", peak = [0.0, -1.0] }

[output]
dir = "out/example1"
workers = 0
"#;

/// L-shaped domain 10 × 10 with the upper-right 5 × 5 quadrant removed,
/// clamped along the top of the vertical leg and loaded downwards with a
/// parabolic profile (peak 1) over the right end of the horizontal leg. The
/// reentrant corner Q sits at (5, 5).
pub const EXAMPLE2: &str = r#"
name = "example2"
rho0 = 0.5
thresholds = [0.12, 0.88]
load_mode = "equilibrated"

[grid]
nx = 32
ny = 32
width = 10.0
height = 10.0
mask = { kind = "remove-upper-right", x = 5.0, y = 5.0 }

[material]
young = 1000.0
poisson = 0.3
rho_min = 0.001

[coarse]
penalty = 1.0
r_min = 1.5
eps = 0.03
max_inner = 200
max_stages = 50

[oc]
zeta = 0.2
eta = 0.5
vol_tol = 1e-9

[fine]
n = 32
penalty = 3.0
r_min = 1.3
eps = 0.01
max_iterations = 300

[projection]
beta0 = 1.0
beta_max = 4.5
mu = 0.5
m_nd_min = 45.0
every = 2

[[supports]]
side = "top"
from = 0.0
to = 5.0
fix = [true, true]

[[loads]]
side = "right"
from = 0.0
to = 5.0
profile = { kind = "parabolic", peak = [0.0, -1.0] }

[output]
dir = "out/example2"
workers = 0
"#;

pub const PRESETS: [(&str, &str); 2] = [
    ("example1", "cantilever beam 2x1, 32x16 cells, parabolic end shear"),
    ("example2", "L-shaped domain 10x10, 32x32 cells, parabolic load near the reentrant corner"),
];

pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "example1" => Some(EXAMPLE1),
        "example2" => Some(EXAMPLE2),
        _ => None,
    }
}
