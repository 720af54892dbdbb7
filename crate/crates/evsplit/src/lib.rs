//! Desk-scale split federated learning under label-skewed clients.
//!
//! The library trains a three-way split model (client-side extractor,
//! server-side processor and head, client-local auxiliary model) with three
//! cooperating mechanisms:
//!
//! - **evidential weighting** ([`aggregation`]): per-client Dirichlet
//!   evidence statistics, accumulated server-side in [`csr`] records, turn
//!   into aggregation weights that favor concentrated, low-uncertainty
//!   clients;
//! - **complementary feature transfer** ([`transfer`]): clients whose label
//!   distributions diverge most from the global mix are paired by a greedy
//!   matching, and a per-class fraction of their smashed features is routed
//!   through the partner's server replica, with gradients returned only to
//!   the originating client;
//! - **dual-teacher distillation** ([`distill`]): each client's auxiliary
//!   model learns from the global model at the prediction level and from the
//!   local extractor at the feature-relation level, enabling offline local
//!   inference.
//!
//! [`engine`] orchestrates rounds deterministically; [`cli`] exposes the
//! `run`, `validate`, and `ablate` subcommands; [`data`] generates synthetic
//! Gaussian datasets with IID or Dirichlet non-IID partitions. The guide in
//! `book/` walks through every mechanism with runnable examples.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod csr;
pub mod data;
pub mod distill;
pub mod edl;
pub mod engine;
pub mod error;
pub mod nn;
pub mod report;
pub mod special;
pub mod transfer;

pub use error::{Error, Result};

// The guide's code blocks double as doctests so the book can never drift
// from the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(split_networks, "../../../book/src/split-networks.md");
    chapter!(
        evidential_uncertainty,
        "../../../book/src/evidential-uncertainty.md"
    );
    chapter!(client_records, "../../../book/src/client-records.md");
    chapter!(
        evidential_weighting,
        "../../../book/src/evidential-weighting.md"
    );
    chapter!(
        complementary_transfer,
        "../../../book/src/complementary-transfer.md"
    );
    chapter!(dual_teacher, "../../../book/src/dual-teacher.md");
    chapter!(
        data_and_partitions,
        "../../../book/src/data-and-partitions.md"
    );
    chapter!(
        running_experiments,
        "../../../book/src/running-experiments.md"
    );
    chapter!(
        theory_diagnostics,
        "../../../book/src/theory-diagnostics.md"
    );
}
