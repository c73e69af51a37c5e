//! Selection-quality metrics, heatmaps and the synthetic passkey harness.

pub mod ablation;
pub mod heatmap;
pub mod metrics;
pub mod passkey;

pub use heatmap::{export_heatmap, heatmap_csv, selection_grid};
pub use metrics::{containment_rate, cover_rate, gini, hit_rate, selection_counts, MetricsReport};
pub use passkey::{build_passkey, run_passkey, PasskeyConfig, PasskeyInstance, PasskeyReport, PasskeyShape};
