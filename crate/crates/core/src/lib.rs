pub mod activity;
pub mod audio;
pub mod augment;
pub mod classifier;
pub mod combine;
pub mod config;
pub mod dataset;
pub mod frontend;
pub mod grad;
pub mod metrics;
pub mod mixit;
pub mod separator;
pub mod synthbird;
