use rand::seq::index::sample;
use rand::Rng;

use super::{BBox, BACKGROUND, GRID};

/// Supervision for one grid cell. Background cells carry no box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellTarget {
    pub cell: usize,
    pub class: usize,
    pub bbox: Option<BBox>,
}

/// Row-major index of the grid cell containing the box center.
pub fn cell_of(b: &BBox) -> usize {
    let (cx, cy) = b.center();
    let idx = |v: f64| ((v * GRID as f64).floor().max(0.0) as usize).min(GRID - 1);
    idx(cy) * GRID + idx(cx)
}

/// Positives first (ascending cell), then `bg_count` background cells drawn
/// without replacement from the remaining cells (ascending cell).
pub fn assign_targets<R: Rng + ?Sized>(objects: &[(BBox, usize)], bg_count: usize, rng: &mut R) -> Vec<CellTarget> {
    let mut owner: Vec<Option<(BBox, usize)>> = vec![None; GRID * GRID];
    for &(b, class) in objects {
        let slot = &mut owner[cell_of(&b)];
        // larger area wins; the earlier box keeps the cell on exact ties
        if slot.is_none_or(|(held, _)| b.area() > held.area()) {
            *slot = Some((b, class));
        }
    }
    let mut out: Vec<CellTarget> = owner
        .iter()
        .enumerate()
        .filter_map(|(cell, o)| o.map(|(b, class)| CellTarget { cell, class, bbox: Some(b) }))
        .collect();

    let free: Vec<usize> = (0..GRID * GRID).filter(|&c| owner[c].is_none()).collect();
    let mut picked: Vec<usize> = sample(rng, free.len(), bg_count.min(free.len()))
        .into_iter()
        .map(|i| free[i])
        .collect();
    picked.sort_unstable();
    out.extend(picked.into_iter().map(|cell| CellTarget { cell, class: BACKGROUND, bbox: None }));
    out
}
