//! Interaction samples, their file format, sample calibration and splitting.

mod calibrate;
mod io;
mod sample;
mod split;

pub use calibrate::{calibrate, check_unique, CalibrationStats, EventIndex};
pub use io::{read_samples, write_samples, SampleHeader, FORMAT_TAG, FORMAT_VERSION};
pub use sample::{validate_hierarchy, Domain, HierarchyMode, HierarchyViolation, InteractionSample};
pub use split::{split_and_calibrate, split_by_session, DatasetSplit, SplitStats};
