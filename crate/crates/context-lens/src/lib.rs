//! Diagnostics toolkit for annotated text corpora built on context embeddings.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`vectorstore`] loads pre-trained word vectors and answers cosine /
//!    nearest-neighbor queries.
//! 2. [`corpus`] + [`alacarte`] turn occurrences of a focal word into
//!    context embeddings (average the context window, apply a learned
//!    linear transform) and pool them into group embeddings.
//! 3. [`embedreg`] regresses instance embeddings on binary document
//!    covariates and reports normed coefficients with permutation
//!    p-values and bootstrap intervals; [`simratio`] ranks vocabulary
//!    features by how discriminant they are between two groups.
//! 4. [`probe`] fits a logistic-regression probe on document embeddings
//!    from a pluggable provider, and [`diagnose`] mines human/machine
//!    disagreements, runs a blinded re-annotation audit, and applies the
//!    similarity-ratio analysis to the disagreement set.
//!
//! Every randomized step draws from a [`rng`] substream keyed by
//! `(seed, kind, index)`, so results are byte-reproducible regardless of
//! thread count.

pub mod alacarte;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod diagnose;
pub mod embedreg;
pub mod probe;
pub mod rng;
pub mod simratio;
pub mod vectorstore;
