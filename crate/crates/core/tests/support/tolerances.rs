//! Pinned tolerances shared by the oracle, resource and acceptance suites.

/// Absolute floor under relative comparisons of quantities near zero.
pub const ABS_FLOOR: f64 = 1e-12;
/// Masked rank-one inner products against the scaled ESP.
pub const ESP_IDENTITY_RTOL: f64 = 1e-10;
/// Implicit against dense cost differences, relative to the cost scale.
pub const COST_DIFFERENCE_RTOL: f64 = 1e-8;
/// Row minimizer against the dense least-squares minimizer.
pub const ROW_SOLVE_RTOL: f64 = 1e-8;
/// Central-difference step, scaled by `1 + |x|`.
pub const FD_STEP: f64 = 1e-5;
/// Analytic gradient against central differences, relative to the gradient scale.
pub const GRADIENT_FD_TOL: f64 = 1e-6;
/// Rounding allowance when checking that basic iterations never raise the cost.
pub const DESCENT_SLACK: f64 = 1e-10;
/// Identity general means against the fitted means.
pub const FIXED_POINT_TOL: f64 = 1e-8;
/// Allowed growth of per-sweep time beyond linear when n quadruples.
pub const LINEAR_SLACK: f64 = 2.0;
