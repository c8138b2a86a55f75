use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::value_err;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// First `k` layers.
    Truncated,
    Middle,
    Last,
    /// Anchored at the first and last teacher layers, evenly spaced between.
    Mixed,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::Truncated => "truncated",
            SelectionMode::Middle => "middle",
            SelectionMode::Last => "last",
            SelectionMode::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "truncated" => Ok(SelectionMode::Truncated),
            "middle" => Ok(SelectionMode::Middle),
            "last" => Ok(SelectionMode::Last),
            "mixed" => Ok(SelectionMode::Mixed),
            other => Err(value_err!("unknown selection mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSelection {
    pub mode: SelectionMode,
    pub indices: Vec<usize>,
}

impl LayerSelection {
    /// Checks the indices against a teacher depth.
    pub fn validate(&self, teacher_layers: usize) -> Result<()> {
        if self.indices.is_empty() {
            return Err(value_err!("empty layer selection"));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(value_err!("layer indices must be strictly increasing: {:?}", self.indices));
        }
        if self.indices.iter().any(|&i| i >= teacher_layers) {
            return Err(value_err!(
                "layer index out of range for a {teacher_layers}-layer teacher: {:?}",
                self.indices
            ));
        }
        Ok(())
    }
}

pub fn select_layers(teacher_layers: usize, student_layers: usize, mode: SelectionMode) -> Result<LayerSelection> {
    if student_layers == 0 || student_layers > teacher_layers {
        return Err(value_err!(
            "cannot select {student_layers} layers from a {teacher_layers}-layer teacher"
        ));
    }
    let (lt, ls) = (teacher_layers, student_layers);
    let indices: Vec<usize> = match mode {
        SelectionMode::Truncated => (0..ls).collect(),
        SelectionMode::Last => (lt - ls..lt).collect(),
        SelectionMode::Middle => {
            let start = (lt - ls) / 2;
            (start..start + ls).collect()
        }
        SelectionMode::Mixed if ls == 1 => alloc::vec![0],
        SelectionMode::Mixed => {
            let mut out: Vec<usize> = Vec::with_capacity(ls);
            for i in 0..ls {
                // round half away from zero
                let pos = libm::round((i * (lt - 1)) as f64 / (ls - 1) as f64) as usize;
                let mut idx = pos;
                while out.contains(&idx) {
                    idx += 1;
                }
                out.push(idx);
            }
            out
        }
    };
    let sel = LayerSelection { mode, indices };
    sel.validate(teacher_layers)?;
    Ok(sel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(select_layers(12, 6, SelectionMode::Mixed).unwrap().indices, [0, 2, 4, 7, 9, 11]);
        assert_eq!(select_layers(12, 6, SelectionMode::Truncated).unwrap().indices, [0, 1, 2, 3, 4, 5]);
        assert_eq!(select_layers(12, 6, SelectionMode::Middle).unwrap().indices, [3, 4, 5, 6, 7, 8]);
        assert_eq!(select_layers(12, 6, SelectionMode::Last).unwrap().indices, [6, 7, 8, 9, 10, 11]);
        for mode in [SelectionMode::Truncated, SelectionMode::Middle, SelectionMode::Last, SelectionMode::Mixed] {
            assert_eq!(select_layers(12, 12, mode).unwrap().indices, (0..12).collect::<Vec<_>>());
        }
        assert_eq!(select_layers(4, 2, SelectionMode::Mixed).unwrap().indices, [0, 3]);
    }

    #[test]
    fn invalid_counts() {
        assert!(select_layers(4, 0, SelectionMode::Mixed).is_err());
        assert!(select_layers(4, 5, SelectionMode::Last).is_err());
        assert!("sideways".parse::<SelectionMode>().is_err());
        assert_eq!("first".parse::<SelectionMode>().unwrap(), SelectionMode::Truncated);
    }

    #[test]
    fn every_mode_is_valid_on_all_small_depths() {
        for lt in 1..16 {
            for ls in 1..=lt {
                for mode in [SelectionMode::Truncated, SelectionMode::Middle, SelectionMode::Last, SelectionMode::Mixed] {
                    let sel = select_layers(lt, ls, mode).unwrap();
                    assert_eq!(sel.indices.len(), ls);
                    if mode == SelectionMode::Mixed && ls > 1 {
                        assert_eq!((sel.indices[0], sel.indices[ls - 1]), (0, lt - 1));
                    }
                }
            }
        }
    }
}
