use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shelf region labels, row-major from the participant's top-left.
///
/// The discriminant is the class index everywhere: confusion matrices,
/// logits, dataset labels. Row = index / 3, column = index % 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    TopLeft,
    TopCenter,
    TopRight,
    CenterLeft,
    Center,
    CenterRight,
    BottomLeft,
    BottomCenter,
    BottomRight,
}

pub const NUM_REGIONS: usize = 9;

/// All regions in class-index order.
pub const REGIONS: [Region; NUM_REGIONS] = [
    Region::TopLeft,
    Region::TopCenter,
    Region::TopRight,
    Region::CenterLeft,
    Region::Center,
    Region::CenterRight,
    Region::BottomLeft,
    Region::BottomCenter,
    Region::BottomRight,
];

/// Shelf columns, used when the 9-way matrix is collapsed to 3 classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShelfColumn {
    Left,
    Center,
    Right,
}

pub const SHELF_COLUMNS: [ShelfColumn; 3] = [ShelfColumn::Left, ShelfColumn::Center, ShelfColumn::Right];

impl Region {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Result<Region> {
        REGIONS
            .get(idx)
            .copied()
            .ok_or_else(|| Error::validation(format!("region index {idx} out of range 0..{NUM_REGIONS}")))
    }

    /// Shelf row, 0 = top.
    pub fn row(self) -> usize {
        self.index() / 3
    }

    pub fn column(self) -> ShelfColumn {
        SHELF_COLUMNS[self.index() % 3]
    }

    /// Short label used in tables and file names: TL, TC, ..., BR.
    pub fn label(self) -> &'static str {
        const LABELS: [&str; NUM_REGIONS] = ["TL", "TC", "TR", "CL", "C", "CR", "BL", "BC", "BR"];
        LABELS[self.index()]
    }

    pub fn from_label(s: &str) -> Result<Region> {
        REGIONS
            .iter()
            .copied()
            .find(|r| r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown region label {s:?} (expected TL..BR)")))
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Region> {
        Region::from_label(s)
    }
}

impl ShelfColumn {
    pub fn index(self) -> usize {
        match self {
            ShelfColumn::Left => 0,
            ShelfColumn::Center => 1,
            ShelfColumn::Right => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ShelfColumn::Left => "L",
            ShelfColumn::Center => "C",
            ShelfColumn::Right => "R",
        }
    }
}
