//! Volume containers, the overlapping patch grid, patch extraction, and
//! grading ground-truth construction.

mod grid;
mod io;
mod volume;

pub use grid::{
    build_patch_grid, make_grading_target, GradingTarget, InitStep, PatchGrid, SubjectClass,
};
pub use io::{
    read_labels, read_manifest, read_volume, write_labels, write_manifest, write_volume,
    SubjectRecord,
};
pub use volume::{LabelVolume, Volume};
