//! Connected components, boundary extraction, and axial-extent analysis.
//!
//! The third array axis is the axial (z) axis; "consecutive 2D slices"
//! always means consecutive z indices.

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, GridGeometry};
use serde::{Deserialize, Serialize};

/// Voxel adjacency used when labeling components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge, and corner neighbors.
    TwentySix,
}

impl Connectivity {
    fn offsets(&self) -> Vec<(i32, i32, i32)> {
        match self {
            Connectivity::Six => vec![
                (-1, 0, 0),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push((dx, dy, dz));
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidParam(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

/// Dense component labeling of a mask. Component ids are 1..=count, assigned
/// in order of each component's smallest linear index; 0 is background.
#[derive(Debug, Clone)]
pub struct ComponentLabeling {
    geometry: GridGeometry,
    labels: Vec<u32>,
    voxel_counts: Vec<usize>,
}

impl ComponentLabeling {
    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.voxel_counts.len()
    }

    /// Voxel count of component `id` (1-based).
    pub fn voxel_count(&self, id: u32) -> Result<usize> {
        self.check_id(id)?;
        Ok(self.voxel_counts[(id - 1) as usize])
    }

    pub fn voxel_counts(&self) -> &[usize] {
        &self.voxel_counts
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if id == 0 || id as usize > self.voxel_counts.len() {
            return Err(Error::InvalidParam(format!(
                "component id {id} out of range 1..={}",
                self.voxel_counts.len()
            )));
        }
        Ok(())
    }

    /// Mask containing exactly component `id`.
    pub fn component_mask(&self, id: u32) -> Result<BinaryMask> {
        self.check_id(id)?;
        let data = self.labels.iter().map(|&l| l == id).collect();
        BinaryMask::new(self.geometry, data)
    }

    /// Mask of all components whose id satisfies the predicate.
    pub fn select(&self, mut keep: impl FnMut(u32) -> bool) -> BinaryMask {
        let mut kept = vec![false; self.voxel_counts.len() + 1];
        for id in 1..=self.voxel_counts.len() as u32 {
            kept[id as usize] = keep(id);
        }
        let data = self.labels.iter().map(|&l| kept[l as usize]).collect();
        BinaryMask::new(self.geometry, data).expect("labeling and mask share geometry")
    }

    /// Longest run of consecutive axial (z) slices intersected by component
    /// `id`.
    pub fn axial_run_length(&self, id: u32) -> Result<usize> {
        self.check_id(id)?;
        let nz = self.geometry.dims[2];
        let slice_len = self.geometry.dims[0] * self.geometry.dims[1];
        let mut present = vec![false; nz];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == id {
                present[i / slice_len] = true;
            }
        }
        let mut best = 0usize;
        let mut run = 0usize;
        for p in present {
            if p {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        Ok(best)
    }

    /// Axis-aligned bounding box of component `id` as inclusive
    /// (min, max) corners.
    pub fn component_bbox(&self, id: u32) -> Result<([usize; 3], [usize; 3])> {
        self.check_id(id)?;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == id {
                let (x, y, z) = self.geometry.coords(i);
                let c = [x, y, z];
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        Ok((lo, hi))
    }
}

/// Label the connected components of a mask under the given adjacency.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let geometry = *mask.geometry();
    let [nx, ny, nz] = geometry.dims;
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut voxel_counts = Vec::new();
    let offsets = connectivity.offsets();
    let mut queue: Vec<usize> = Vec::new();

    for start in 0..data.len() {
        if !data[start] || labels[start] != 0 {
            continue;
        }
        let id = voxel_counts.len() as u32 + 1;
        let mut size = 0usize;
        labels[start] = id;
        queue.clear();
        queue.push(start);
        while let Some(i) = queue.pop() {
            size += 1;
            let (x, y, z) = geometry.coords(i);
            for &(dx, dy, dz) in &offsets {
                let xx = x as i32 + dx;
                let yy = y as i32 + dy;
                let zz = z as i32 + dz;
                if xx < 0 || yy < 0 || zz < 0 {
                    continue;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= nx || yy >= ny || zz >= nz {
                    continue;
                }
                let j = geometry.index(xx, yy, zz);
                if data[j] && labels[j] == 0 {
                    labels[j] = id;
                    queue.push(j);
                }
            }
        }
        voxel_counts.push(size);
    }

    ComponentLabeling {
        geometry,
        labels,
        voxel_counts,
    }
}

/// Keep components with voxel count >= `min_voxels`; strictly smaller ones
/// are discarded.
pub fn filter_components(labeling: &ComponentLabeling, min_voxels: usize) -> BinaryMask {
    labeling.select(|id| labeling.voxel_counts()[(id - 1) as usize] >= min_voxels)
}

/// Set voxels with at least one 6-neighbor unset or lying on the grid
/// border. The boundary definition is 6-adjacent regardless of the
/// connectivity used for labeling.
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<(usize, usize, usize)> {
    let geometry = mask.geometry();
    let [nx, ny, nz] = geometry.dims;
    let data = mask.data();
    let mut out = Vec::new();
    for (i, &set) in data.iter().enumerate() {
        if !set {
            continue;
        }
        let (x, y, z) = geometry.coords(i);
        let on_border = x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
        let exposed = on_border
            || !data[geometry.index(x - 1, y, z)]
            || !data[geometry.index(x + 1, y, z)]
            || !data[geometry.index(x, y - 1, z)]
            || !data[geometry.index(x, y + 1, z)]
            || !data[geometry.index(x, y, z - 1)]
            || !data[geometry.index(x, y, z + 1)];
        if exposed {
            out.push((x, y, z));
        }
    }
    out
}
