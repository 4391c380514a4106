pub mod approx;
pub mod bump;
pub mod experiments;
pub mod fit;
pub mod functionals;
pub mod jet;
pub mod quadrature;
pub mod separable;
pub mod solver;
pub mod spectral;
