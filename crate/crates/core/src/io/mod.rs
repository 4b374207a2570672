//! On-disk formats: the native volume file, NIfTI import and cohort directories.

pub mod cohort;
pub mod nifti;
pub mod volume_file;
