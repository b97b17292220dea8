//! Volumes, NIfTI files, encoder feature files, reports and overlays.

mod features;
mod nifti;
mod overlay;
mod report;
mod volume;

pub use features::{fnv1a64, read_feature_file, write_feature_file, FeatureFile, FeatureLevel, FEATURE_MAGIC};
pub use nifti::{decode_nifti, read_label, read_nifti, subject_from_path, write_label, write_nifti};
pub use overlay::{render_overlay, write_overlay, Plane, Rgb};
pub use report::{read_report, write_report, EvalReport, MeanMetrics, SubjectMetrics};
pub use volume::{Geometry, LabelVolume, Volume};
