//! Spatial scan orders: the four paths that turn an `H x W` map into token
//! sequences, and their inverses.
//!
//! A path is a permutation `perm` of raster indices (`h * W + w`):
//! sequence position `t` reads pixel `perm[t]`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Horizontal, vertical, and both reversed.
    Ss2d,
    /// Horizontal, vertical, diagonal and anti-diagonal.
    #[default]
    Cs2d,
}

impl ScanMode {
    pub fn directions(self) -> [Direction; 4] {
        use Direction::*;
        match self {
            ScanMode::Ss2d => [Horizontal, Vertical, HorizontalReverse, VerticalReverse],
            ScanMode::Cs2d => [Horizontal, Vertical, Diagonal, AntiDiagonal],
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::Ss2d => "ss2d",
            ScanMode::Cs2d => "cs2d",
        })
    }
}

impl std::str::FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss2d" => Ok(ScanMode::Ss2d),
            "cs2d" => Ok(ScanMode::Cs2d),
            other => Err(Error::config(format!("unknown scan mode `{other}` (expected ss2d or cs2d)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Raster order, row by row.
    Horizontal,
    /// Column-major order.
    Vertical,
    HorizontalReverse,
    VerticalReverse,
    /// Bands `h + w = d` for ascending `d`, ascending `h` inside a band.
    Diagonal,
    /// Bands `h + (W - 1 - w) = d` starting at the top-right corner,
    /// ascending `h` inside a band.
    AntiDiagonal,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
            Direction::HorizontalReverse => "horizontal_reverse",
            Direction::VerticalReverse => "vertical_reverse",
            Direction::Diagonal => "diagonal",
            Direction::AntiDiagonal => "anti_diagonal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub direction: Direction,
    pub h: usize,
    pub w: usize,
    /// Sequence position to raster index.
    pub perm: Arc<[usize]>,
    /// Raster index to sequence position.
    pub inv: Arc<[usize]>,
}

impl ScanOrder {
    pub fn new(direction: Direction, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::config(format!("scan paths need non-empty maps, got {h}x{w}")));
        }
        let perm: Vec<usize> = match direction {
            Direction::Horizontal => (0..h * w).collect(),
            Direction::Vertical => (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect(),
            Direction::HorizontalReverse => (0..h * w).rev().collect(),
            Direction::VerticalReverse => {
                let mut v: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
                v.reverse();
                v
            }
            Direction::Diagonal => bands(h, w, |r, d| d.checked_sub(r).filter(|&c| c < w)),
            Direction::AntiDiagonal => bands(h, w, |r, d| {
                // d = r + (w - 1 - c)  =>  c = w - 1 - (d - r)
                d.checked_sub(r).and_then(|k| (w - 1).checked_sub(k))
            }),
        };
        let mut inv = vec![0; perm.len()];
        for (t, &p) in perm.iter().enumerate() {
            inv[p] = t;
        }
        Ok(ScanOrder {
            direction,
            h,
            w,
            perm: perm.into(),
            inv: inv.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `(t, h, w)` for every sequence position.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.perm.iter().enumerate().map(|(t, &p)| (t, p / self.w, p % self.w))
    }
}

/// Enumerate bands `d = 0..h + w - 1`, rows ascending, keeping cells where
/// `col(r, d)` yields a column.
fn bands(h: usize, w: usize, col: impl Fn(usize, usize) -> Option<usize>) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w);
    for d in 0..h + w - 1 {
        for r in 0..h.min(d + 1) {
            if let Some(c) = col(r, d) {
                out.push(r * w + c);
            }
        }
    }
    out
}

pub type Paths = Arc<[ScanOrder; 4]>;

/// The four orders of `mode` for an `h x w` map. Results are cached.
pub fn build_paths(h: usize, w: usize, mode: ScanMode) -> Result<Paths> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, ScanMode), Paths>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&(h, w, mode)) {
        return Ok(Arc::clone(p));
    }
    let [a, b, c, d] = mode.directions();
    let paths: Paths = Arc::new([
        ScanOrder::new(a, h, w)?,
        ScanOrder::new(b, h, w)?,
        ScanOrder::new(c, h, w)?,
        ScanOrder::new(d, h, w)?,
    ]);
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert((h, w, mode), Arc::clone(&paths));
    Ok(paths)
}

fn check_map<T: Element>(op: &'static str, x: &Var<T>, order: &ScanOrder) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[2] != order.h || s[3] != order.w {
        return Err(Error::shape(op, format!("map {s:?} vs order for {}x{}", order.h, order.w)));
    }
    Ok(())
}

/// `[N, C, H, W] -> [N, C, L]` with `out[.., t] = x[.., perm[t]]`.
pub fn flatten_along<T: Element>(t: &mut Tape<T>, x: &Var<T>, order: &ScanOrder) -> Result<Var<T>> {
    check_map("flatten_along", x, order)?;
    let s = x.shape();
    let flat = ops::reshape(t, x, &[s[0], s[1], s[2] * s[3]])?;
    ops::gather_last(t, &flat, Arc::clone(&order.perm))
}

/// Inverse of [`flatten_along`]: `[N, C, L] -> [N, C, H, W]`.
pub fn unflatten_along<T: Element>(t: &mut Tape<T>, y: &Var<T>, order: &ScanOrder) -> Result<Var<T>> {
    let s = y.shape();
    if s.len() != 3 || s[2] != order.len() {
        return Err(Error::shape("unflatten_along", format!("sequence {s:?} vs order of length {}", order.len())));
    }
    let g = ops::gather_last(t, y, Arc::clone(&order.inv))?;
    ops::reshape(t, &g, &[s[0], s[1], order.h, order.w])
}

/// Sum of the four sequences, each scattered back through its own order.
pub fn merge_directions<T: Element>(t: &mut Tape<T>, ys: &[Var<T>], orders: &[ScanOrder]) -> Result<Var<T>> {
    if ys.len() != 4 || orders.len() != 4 {
        return Err(Error::shape("merge_directions", format!("need 4 sequences and 4 orders, got {} and {}", ys.len(), orders.len())));
    }
    let s = ys[0].shape().to_vec();
    for (y, o) in ys.iter().zip(orders) {
        if y.shape() != s.as_slice() || s.len() != 3 || o.len() != s[2] || (o.h, o.w) != (orders[0].h, orders[0].w) {
            return Err(Error::shape("merge_directions", format!("sequence {:?} with order {}x{}", y.shape(), o.h, o.w)));
        }
    }
    let l = s[2];
    let rows = s[0] * s[1];
    let mut out = vec![T::zero(); rows * l];
    // ordered sum d = 0..3 at every pixel
    for (y, o) in ys.iter().zip(orders) {
        for r in 0..rows {
            let src = &y.data()[r * l..(r + 1) * l];
            let dst = &mut out[r * l..(r + 1) * l];
            for (tpos, &p) in o.perm.iter().enumerate() {
                dst[p] += src[tpos];
            }
        }
    }
    let value = Tensor::from_parts(vec![s[0], s[1], orders[0].h, orders[0].w], out);
    let perms: Vec<Arc<[usize]>> = orders.iter().map(|o| Arc::clone(&o.perm)).collect();
    let parents: Vec<&Var<T>> = ys.iter().collect();
    Ok(t.record("merge_directions", value, &parents, move |g, sink| {
        for (k, perm) in perms.iter().enumerate() {
            if let Some(gy) = sink.slot(k) {
                for r in 0..rows {
                    let src = &g[r * l..(r + 1) * l];
                    for (tpos, &p) in perm.iter().enumerate() {
                        gy[r * l + tpos] += src[p];
                    }
                }
            }
        }
    }))
}
