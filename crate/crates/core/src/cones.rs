//! Light-cone geometry and extraction of past/future cone configurations.
//!
//! A past light cone (PLC) at (r, t) holds every X(u, s) with s < t and
//! |u − r|∞ ≤ c·(t − s), truncated at `h_p` steps back. The future light cone
//! (FLC) mirrors it forward up to `h_f`. Whether the present cell X(r, t)
//! belongs to the past or the future cone is a convention set by
//! [`Presence`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Field, Lattice};
use crate::matrix::RowMatrix;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Presence {
    Past,
    #[default]
    Future,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeGeometry {
    /// Speed of propagation in cells per step.
    pub c: usize,
    pub h_p: usize,
    pub h_f: usize,
    pub present_in: Presence,
}

impl Default for ConeGeometry {
    fn default() -> Self {
        Self { c: 1, h_p: 2, h_f: 0, present_in: Presence::Future }
    }
}

impl ConeGeometry {
    pub fn new(c: usize, h_p: usize, h_f: usize, present_in: Presence) -> Result<Self> {
        let g = Self { c, h_p, h_f, present_in };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(invalid("speed of propagation c must be positive"));
        }
        match self.present_in {
            Presence::Future if self.h_p == 0 => Err(invalid("h_p = 0 with the present in the future cone leaves the past cone empty")),
            Presence::Past if self.h_f == 0 => Err(invalid("h_f = 0 with the present in the past cone leaves the future cone empty")),
            _ => Ok(()),
        }
    }

    /// Earliest time offset touched by either cone (≤ 0).
    pub fn past_reach(&self) -> usize {
        self.h_p
    }

    /// Latest time offset touched by either cone (≥ 0).
    pub fn future_reach(&self) -> usize {
        self.h_f
    }
}

/// A single stencil cell relative to the cone apex.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub dt: isize,
    pub dr: Vec<isize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConeOffsets {
    pub plc: Vec<Offset>,
    pub flc: Vec<Offset>,
}

/// All spatial displacements with max-norm ≤ `radius`, lexicographically ordered.
fn square_ball(radius: isize, dims: usize) -> Vec<Vec<isize>> {
    let mut out = vec![Vec::with_capacity(dims)];
    for _ in 0..dims {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-radius..=radius).map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    p
                })
            })
            .collect();
    }
    out
}

fn layer(dt: isize, c: usize, dims: usize) -> impl Iterator<Item = Offset> {
    let radius = c as isize * dt.abs();
    square_ball(radius, dims).into_iter().map(move |dr| Offset { dt, dr })
}

/// Stencils of the past and future cones for `spatial_dims` spatial axes,
/// each sorted by (Δt, Δr).
pub fn cone_offsets(geometry: &ConeGeometry, spatial_dims: usize) -> Result<ConeOffsets> {
    geometry.validate()?;
    if spatial_dims == 0 {
        return Err(invalid("need at least one spatial dimension"));
    }
    let h_p = geometry.h_p as isize;
    let h_f = geometry.h_f as isize;
    let (past_top, future_bottom) = match geometry.present_in {
        Presence::Past => (0, 1),
        Presence::Future => (-1, 0),
    };
    let plc: Vec<Offset> = (-h_p..=past_top).flat_map(|dt| layer(dt, geometry.c, spatial_dims)).collect();
    let flc: Vec<Offset> = (future_bottom..=h_f).flat_map(|dt| layer(dt, geometry.c, spatial_dims)).collect();
    debug_assert!(plc.windows(2).all(|w| w[0] < w[1]) && flc.windows(2).all(|w| w[0] < w[1]));
    Ok(ConeOffsets { plc, flc })
}

/// Past and future cone configurations for every admissible point-instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSet {
    pub plc: RowMatrix,
    pub flc: RowMatrix,
    /// (flat site, time) of each row; time is 0-based within the source field.
    pub coords: Vec<(usize, usize)>,
    pub geometry: ConeGeometry,
    pub lattice: Lattice,
}

impl ConeSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_p(&self) -> usize {
        self.plc.cols()
    }

    pub fn n_f(&self) -> usize {
        self.flc.cols()
    }

    /// Keeps only the listed rows.
    pub fn subset(&self, rows: &[usize]) -> ConeSet {
        ConeSet {
            plc: self.plc.select_rows(rows),
            flc: self.flc.select_rows(rows),
            coords: rows.iter().map(|&i| self.coords[i]).collect(),
            geometry: self.geometry,
            lattice: self.lattice.clone(),
        }
    }

    /// Rows whose time coordinate satisfies `keep`.
    pub fn filter_time(&self, keep: impl Fn(usize) -> bool) -> ConeSet {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.coords[i].1)).collect();
        self.subset(&rows)
    }
}

/// Neighbor-site table: `table[k][site]` is the site reached by spatial
/// offset `k`, or `None` outside an open lattice.
fn site_table(lattice: &Lattice, offsets: &[Offset]) -> Vec<Vec<Option<usize>>> {
    offsets.iter().map(|o| (0..lattice.n_sites()).map(|s| lattice.offset_site(s, &o.dr)).collect()).collect()
}

/// Gathers PLC and FLC rows for every (r, t) whose cones stay inside the
/// field in time (and in space, for open lattices). Rows are ordered by t,
/// then r.
pub fn extract_cones(field: &Field, geometry: &ConeGeometry) -> Result<ConeSet> {
    let offsets = cone_offsets(geometry, field.lattice().dims())?;
    let margin = geometry.past_reach() + geometry.future_reach();
    if field.steps() <= margin {
        return Err(Error::InsufficientTimeSteps { needed: margin, got: field.steps() });
    }
    let lattice = field.lattice().clone();
    let plc_sites = site_table(&lattice, &offsets.plc);
    let flc_sites = site_table(&lattice, &offsets.flc);
    let n_sites = lattice.n_sites();
    let usable: Vec<usize> = (0..n_sites).filter(|&s| plc_sites.iter().chain(&flc_sites).all(|col| col[s].is_some())).collect();

    let first_t = geometry.past_reach();
    let last_t = field.steps() - 1 - geometry.future_reach();
    let gather = |t: usize, table: &[Vec<Option<usize>>], stencil: &[Offset], site: usize, out: &mut Vec<f64>| {
        for (col, o) in table.iter().zip(stencil) {
            let s = col[site].expect("usable sites stay on the lattice");
            out.push(field.get(s, (t as isize + o.dt) as usize));
        }
    };
    let slices = par::map_range(last_t - first_t + 1, |k| {
        let t = first_t + k;
        let mut plc = Vec::with_capacity(usable.len() * offsets.plc.len());
        let mut flc = Vec::with_capacity(usable.len() * offsets.flc.len());
        for &s in &usable {
            gather(t, &plc_sites, &offsets.plc, s, &mut plc);
            gather(t, &flc_sites, &offsets.flc, s, &mut flc);
        }
        (plc, flc)
    });

    let n = usable.len() * slices.len();
    let mut plc = Vec::with_capacity(n * offsets.plc.len());
    let mut flc = Vec::with_capacity(n * offsets.flc.len());
    let mut coords = Vec::with_capacity(n);
    for (k, (p, f)) in slices.into_iter().enumerate() {
        plc.extend(p);
        flc.extend(f);
        coords.extend(usable.iter().map(|&s| (s, first_t + k)));
    }
    Ok(ConeSet {
        plc: RowMatrix::from_vec(n, offsets.plc.len(), plc)?,
        flc: RowMatrix::from_vec(n, offsets.flc.len(), flc)?,
        coords,
        geometry: *geometry,
        lattice,
    })
}
