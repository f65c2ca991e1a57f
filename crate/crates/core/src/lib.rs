// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataio;
pub mod ddl;
pub mod dtl;
pub mod error;
pub mod experiment;
pub mod guard;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod transform;

pub use config::{layers_for_depth, InputScale, TrainConfig};
pub use ddl::{ddl_infer_representation, ddl_predict, ddl_update_step, train_mlcddl, DdlModel};
pub use dtl::{dtl_infer, dtl_predict, dtl_update_step, train_mlcdtl, DtlModel};
pub use error::{Error, Result};
pub use model::{LabelInfo, Model, Prediction};
pub use numerics::{ActivationSpec, Matrix, Ridge};
