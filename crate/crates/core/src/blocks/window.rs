//! Non-overlapping window tiling with exact inverse.

use std::rc::Rc;

use crate::autodiff::{Var, ZERO_ROW};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

/// Row order of a partitioned tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowLayout {
    /// `[windows, positions, C]`.
    WindowMajor,
    /// `[positions, windows, C]`: one matrix product mixes every window at once.
    PositionMajor,
}

/// Everything needed to undo a partition.
#[derive(Clone, Debug)]
pub struct WindowMeta {
    pub grid: Grid,
    pub window: Vec<usize>,
    pub shift: Vec<usize>,
    /// Zero padding added below each axis (equals `shift`).
    pub pad_low: Vec<usize>,
    /// Zero padding added above each axis.
    pub pad_high: Vec<usize>,
    pub counts: Vec<usize>,
    pub layout: WindowLayout,
    partition: Rc<Vec<u32>>,
    merge: Rc<Vec<u32>>,
}

impl WindowMeta {
    pub fn new(grid: &Grid, window: &[usize], shift: &[usize], layout: WindowLayout) -> Result<Self> {
        let d = grid.rank();
        if window.len() != d || shift.len() != d {
            return Err(Error::shape("window_partition", format!("window {window:?}/shift {shift:?} on rank {d}")));
        }
        if window.iter().zip(shift).any(|(&w, &s)| w == 0 || s >= w) {
            return Err(Error::shape("window_partition", format!("window {window:?} with shift {shift:?}")));
        }
        let mut counts = Vec::with_capacity(d);
        let mut pad_high = Vec::with_capacity(d);
        for ax in 0..d {
            let n = grid.extents()[ax] + shift[ax];
            let c = n.div_ceil(window[ax]);
            counts.push(c);
            pad_high.push(c * window[ax] - n);
        }
        let nwin: usize = counts.iter().product();
        let tvol: usize = window.iter().product();
        let win_grid = Grid::new(counts.clone())?;
        let pos_grid = Grid::new(window.to_vec())?;
        let row_of = |w: usize, t: usize| match layout {
            WindowLayout::WindowMajor => w * tvol + t,
            WindowLayout::PositionMajor => t * nwin + w,
        };
        let mut partition = vec![ZERO_ROW; nwin * tvol];
        let (mut wc, mut tc) = (vec![0; d], vec![0; d]);
        for w in 0..nwin {
            win_grid.coords_into(w, &mut wc);
            for t in 0..tvol {
                pos_grid.coords_into(t, &mut tc);
                let mut off = Some(0);
                for ax in 0..d {
                    let padded = wc[ax] * window[ax] + tc[ax];
                    let src = padded as isize - shift[ax] as isize;
                    if src < 0 || src >= grid.extents()[ax] as isize {
                        off = None;
                        break;
                    }
                    off = off.map(|o| o + src as usize * grid.strides()[ax]);
                }
                if let Some(o) = off {
                    partition[row_of(w, t)] = o as u32;
                }
            }
        }
        let mut merge = vec![0u32; grid.numel()];
        let mut pc = vec![0; d];
        for (p, m) in merge.iter_mut().enumerate() {
            grid.coords_into(p, &mut pc);
            let (mut w, mut t) = (0, 0);
            for ax in 0..d {
                let padded = pc[ax] + shift[ax];
                w = w * counts[ax] + padded / window[ax];
                t = t * window[ax] + padded % window[ax];
            }
            *m = row_of(w, t) as u32;
        }
        Ok(Self {
            grid: grid.clone(),
            window: window.to_vec(),
            shift: shift.to_vec(),
            pad_low: shift.to_vec(),
            pad_high,
            counts,
            layout,
            partition: Rc::new(partition),
            merge: Rc::new(merge),
        })
    }

    pub fn num_windows(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn window_volume(&self) -> usize {
        self.window.iter().product()
    }

    /// Shape of the partitioned tensor for `channels` channels.
    pub fn windows_shape(&self, channels: usize) -> Vec<usize> {
        match self.layout {
            WindowLayout::WindowMajor => vec![self.num_windows(), self.window_volume(), channels],
            WindowLayout::PositionMajor => vec![self.window_volume(), self.num_windows(), channels],
        }
    }

    pub fn partition<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != self.grid.rank() + 1 || &shape[..self.grid.rank()] != self.grid.extents() {
            return Err(Error::shape("window_partition", format!("{shape:?} on grid {:?}", self.grid.extents())));
        }
        let c = shape[self.grid.rank()];
        x.gather_rows(Rc::clone(&self.partition), self.windows_shape(c))
    }

    pub fn merge<'t, T: Real>(&self, windows: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = windows.shape();
        let c = *shape.last().expect("non-empty shape");
        if shape != self.windows_shape(c) {
            return Err(Error::shape("window_merge", format!("{shape:?} does not match {:?}", self.windows_shape(c))));
        }
        windows.gather_rows(Rc::clone(&self.merge), self.grid.with_channels(c))
    }
}

/// Partition a `[grid..., C]` map into `[windows, positions, C]` tiles.
pub fn window_partition<'t, T: Real>(
    x: Var<'t, T>,
    grid: &Grid,
    window: &[usize],
    shift: &[usize],
) -> Result<(Var<'t, T>, WindowMeta)> {
    let meta = WindowMeta::new(grid, window, shift, WindowLayout::WindowMajor)?;
    Ok((meta.partition(x)?, meta))
}

pub fn window_merge<'t, T: Real>(windows: Var<'t, T>, meta: &WindowMeta) -> Result<Var<'t, T>> {
    meta.merge(windows)
}
