//! Local solutions of the degenerate Monge-Ampere equation that characterises
//! asymptotic directions of area-preserving flows on a Riemannian surface.

pub mod banded;
pub mod elliptic;
pub mod error;
pub mod expr;
pub mod field;
pub mod hyperbolic;
pub mod iteration;
pub mod jet;
pub mod metric;
pub mod normalization;
pub mod operator;
pub mod seed;
pub mod verify;

pub use error::{Error, Result};
pub use expr::Expr;
pub use jet::Jet;
pub use metric::{
    christoffel, christoffel_jet, classify, gaussian_curvature, CurvatureClass, CurvatureTag,
    LocalGeometry, MetricJet, MetricPatch, Preset, Rect,
};
pub use normalization::{align_and_scale, kill_christoffel, normalize, ChartMap, Normalized};
pub use field::{Convention, GridField, Polynomial, Samples, ScalarField, VectorField2};
pub use operator::{
    darboux_residual, g_operator, ma_residual, stream_vector, vector_residuals,
};
pub use seed::{
    reduced_source, scale_problem, seed_elliptic, seed_hyperbolic, seed_mixed, seed_order_check,
    CaseTag, ScaledProblem, SeedPolynomial,
};
pub use elliptic::{picard_solve, DiscGrid, EllipticConfig, EllipticSolution};
pub use hyperbolic::{
    BoundarySplit, FirstOrderSystem, HyperbolicConfig, HyperbolicSolution, SplitControl, StateGrid,
};
pub use verify::{
    convergence_study, full_pipeline, PipelineConfig, PipelineOutput, SolveReport, StudyTable,
    REPORT_SCHEMA,
};
