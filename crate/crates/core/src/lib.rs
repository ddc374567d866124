//! Adversarial training with variation regularization, at desk scale.
//!
//! Train small affine or one-hidden-layer models against a source threat
//! model, measure how far their features move inside a perturbation ball
//! (the *variation*), and check how well that predicts robustness to larger,
//! unseen threat models. See the guide in `book/` for a walkthrough; its
//! snippets run as doctests.

pub mod attack;
pub mod data;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod svg;
pub mod threat;
pub mod training;
pub mod variation;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/threat-models.md")]
    mod threat_models {}
    #[doc = include_str!("../../../book/src/variation.md")]
    mod variation {}
    #[doc = include_str!("../../../book/src/expansion.md")]
    mod expansion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
