//! Reverse-mode differentiation.
//!
//! A [`Tape`] records every forward op with its inputs and output value;
//! [`Tape::backward`] walks the record once in reverse, applying each op's
//! gradient rule. Trainable tensors live in a [`ParamStore`] and enter a tape
//! through [`Tape::param`].

mod gradcheck;
pub mod graph;
mod param;
mod tape;

pub use gradcheck::{
    check_closure, grad_check, grad_check_all, registered_checks, GradCheckReport, InputReport,
};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Op, Tape, Var};
