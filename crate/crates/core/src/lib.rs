pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod clients;
pub mod conditioning;
pub mod dual;
pub mod error;
pub mod gradcheck;
pub mod media;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod tensor;
pub mod toy;
pub mod training;

pub use autograd::{reverse_gradient, Graph, Var};
pub use error::{Error, Result};
pub use gradcheck::finite_difference_gradient;
pub use tensor::{Param, ParamSet, Tensor};
