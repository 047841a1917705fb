//! Evaluation: image metrics, the exact entropy/information oracle, and
//! the attention complexity benchmark.

mod bench;
mod info;
mod metrics;

pub use bench::{bench_mmlc, BenchPoint, BenchReport, FitSeries};
pub use info::{cond_entropy, cond_mutual_info, Axis, JointDistribution, MAX_ALPHABET};
pub use metrics::{detect_edges, edge_f1, fmt_metric, mse, psnr, ssim, MetricReport};
