//! Decentralized dataset dictionary learning for multi-source domain adaptation.
//!
//! Every client holds a private dataset and a local dictionary of labeled
//! empirical distributions ("atoms"). Clients represent their data as a
//! Wasserstein barycenter of the atoms, exchange atoms with peers over a gossip
//! protocol, and the unlabeled target client finally reads its labels off the
//! learned dictionary.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`distribution`] | [`LabeledDistribution`], the uniform-weight empirical measure |
//! | [`ot`] | ground costs, exact and entropic transport solvers, barycentric projection |
//! | [`barycenter`] | free-support Wasserstein barycenters and barycenter hulls |
//! | [`dictionary`] | dictionary state, frozen-plan loss/gradients, local client update |
//! | [`protocol`] | gossip rounds, the server baseline, transport and message accounting |
//! | [`inference`] | barycentric label reconstruction and atom-classifier ensembles |
//! | [`data`] | synthetic shifted domains and the CSV feature format |
//! | [`metrics`] | accuracy and the inter-client consensus curve |

pub mod barycenter;
pub mod data;
pub mod dictionary;
pub mod distribution;
mod error;
pub mod inference;
pub mod metrics;
pub mod ot;
pub mod protocol;
pub mod simplex;

pub use distribution::LabeledDistribution;
pub use error::{Error, Result};
