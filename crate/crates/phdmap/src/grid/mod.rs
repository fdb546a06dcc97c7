//! Egocentric particle store: a 3D circular buffer of fixed-capacity voxel
//! cells indexed by Morton code, plus the per-instance registry.
//!
//! The grid covers a cubic window of `2^m` voxels per axis on the global
//! voxel lattice (`floor(p / l_voxel)`). Recentering shifts the window by
//! whole voxels and clears the cells that scroll out; surviving particles
//! never move in the world frame. Cell storage is a slab so that a cell
//! lookup is O(1) from the dense Morton-ordered index.

pub mod morton;

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Read, Write};

use nalgebra::{Point3, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::geometry::RigidTransform;
use morton::{morton_decode, morton_encode};

pub type InstanceId = u32;

/// Instance ID of unlabeled measurements / unknown space.
pub const UNLABELED: InstanceId = 0;

const NO_CELL: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("background instance {0} cannot receive a non-identity transform")]
    BackgroundTransform(InstanceId),
    #[error("grid exponent m={0} out of supported range 1..=10")]
    BadExponent(u32),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed snapshot: {0}")]
    BadSnapshot(String),
}

/// A weighted hypothesis of one surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    /// Position in the map frame (meters).
    pub position: Point3<f64>,
    pub instance_id: InstanceId,
    pub weight: f64,
    /// Time step when last updated by a same-ID measurement.
    pub last_match_step: u32,
    /// Time step when the particle was created.
    pub born_step: u32,
    /// Born from a memory template and not yet confirmed by a measurement.
    pub template_unconfirmed: bool,
    pub valid: bool,
}

impl Particle {
    pub fn new(position: Point3<f64>, instance_id: InstanceId, weight: f64, step: u32) -> Self {
        Self {
            position,
            instance_id,
            weight,
            last_match_step: step,
            born_step: step,
            template_unconfirmed: false,
            valid: true,
        }
    }
}

/// Stable reference to a particle slot. Becomes stale when the cell is freed,
/// reallocated or resampled (generation mismatch) or the slot is cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParticleRef {
    pub cell: u32,
    pub generation: u32,
    pub slot: u8,
}

#[derive(Debug, Clone, Copy)]
struct CellMeta {
    /// Global voxel coordinate this cell currently represents.
    gv: [i64; 3],
    generation: u32,
    live: u8,
    in_use: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    OutOfRange,
    CellFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Accepted(ParticleRef),
    ResampledThenAccepted(ParticleRef),
    Discarded(DiscardReason),
}

impl InsertOutcome {
    pub fn reference(&self) -> Option<ParticleRef> {
        match self {
            InsertOutcome::Accepted(r) | InsertOutcome::ResampledThenAccepted(r) => Some(*r),
            InsertOutcome::Discarded(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecenterReport {
    pub shift: [i64; 3],
    /// Voxels that left (= entered) the window.
    pub voxels_exchanged: usize,
    pub cells_cleared: usize,
    pub particles_cleared: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MoveReport {
    pub moved: usize,
    pub discarded_out_of_range: usize,
    pub discarded_full: usize,
}

/// The egocentric voxel grid.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    m: u32,
    side: i64,
    l_voxel: f64,
    capacity: usize,
    /// Global voxel coordinate of the window's minimum corner.
    origin_voxel: [i64; 3],
    /// Sub-voxel remainder of the requested window origin, in `[0, l_voxel)`.
    anchor_residual: Vector3<f64>,
    /// Dense Morton-ordered map from storage index to slab cell (or NO_CELL).
    index: Vec<u32>,
    cells: Vec<CellMeta>,
    pool: Vec<Particle>,
    free: Vec<u32>,
}

impl VoxelGrid {
    /// Creates a grid of `2^m` voxels per axis with edge `l_voxel`, windowed
    /// so that `center` lies at the middle of the volume.
    pub fn new(m: u32, l_voxel: f64, capacity: usize, center: &Point3<f64>) -> Result<Self, GridError> {
        if m == 0 || m > 10 {
            return Err(GridError::BadExponent(m));
        }
        assert!(l_voxel > 0.0, "voxel edge must be positive");
        assert!(capacity >= 1 && capacity <= u8::MAX as usize);
        let side = 1i64 << m;
        let half = side as f64 * l_voxel / 2.0;
        let mut origin_voxel = [0i64; 3];
        let mut anchor_residual = Vector3::zeros();
        for a in 0..3 {
            let desired = center[a] - half;
            let v = (desired / l_voxel).floor();
            origin_voxel[a] = v as i64;
            anchor_residual[a] = desired - v * l_voxel;
        }
        let n = (side * side * side) as usize;
        Ok(Self {
            m,
            side,
            l_voxel,
            capacity,
            origin_voxel,
            anchor_residual,
            index: vec![NO_CELL; n],
            cells: Vec::new(),
            pool: Vec::new(),
            free: Vec::new(),
        })
    }

    pub fn exponent(&self) -> u32 {
        self.m
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    pub fn l_voxel(&self) -> f64 {
        self.l_voxel
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn origin_voxel(&self) -> [i64; 3] {
        self.origin_voxel
    }

    pub fn anchor_residual(&self) -> Vector3<f64> {
        self.anchor_residual
    }

    /// Total extent of the window per axis, in meters.
    pub fn extent(&self) -> f64 {
        self.side as f64 * self.l_voxel
    }

    /// Global voxel coordinate containing `p`.
    pub fn global_voxel_of(&self, p: &Point3<f64>) -> [i64; 3] {
        [
            (p.x / self.l_voxel).floor() as i64,
            (p.y / self.l_voxel).floor() as i64,
            (p.z / self.l_voxel).floor() as i64,
        ]
    }

    /// Center of a global voxel, in meters.
    pub fn voxel_center(&self, gv: [i64; 3]) -> Point3<f64> {
        Point3::new(
            (gv[0] as f64 + 0.5) * self.l_voxel,
            (gv[1] as f64 + 0.5) * self.l_voxel,
            (gv[2] as f64 + 0.5) * self.l_voxel,
        )
    }

    pub fn in_range(&self, gv: [i64; 3]) -> bool {
        (0..3).all(|a| {
            let d = gv[a] - self.origin_voxel[a];
            d >= 0 && d < self.side
        })
    }

    /// Storage (Morton) index of an in-range global voxel.
    pub fn storage_index(&self, gv: [i64; 3]) -> u64 {
        let s = [
            gv[0].rem_euclid(self.side) as u64,
            gv[1].rem_euclid(self.side) as u64,
            gv[2].rem_euclid(self.side) as u64,
        ];
        morton_encode(s[0], s[1], s[2]).expect("storage coordinate fits m bits")
    }

    /// Inverse of [`storage_index`](Self::storage_index) for the current window.
    pub fn voxel_of_storage(&self, code: u64) -> [i64; 3] {
        let (sx, sy, sz) = morton_decode(code);
        let mut gv = [0i64; 3];
        for (a, s) in [sx, sy, sz].iter().enumerate() {
            let o = self.origin_voxel[a];
            // The unique gv in [o, o+side) congruent to s mod side.
            let rem = o.rem_euclid(self.side);
            let mut v = o - rem + *s as i64;
            if v < o {
                v += self.side;
            }
            gv[a] = v;
        }
        gv
    }

    /// Slab cell holding the voxel `gv`, when allocated and in range.
    pub fn cell_at(&self, gv: [i64; 3]) -> Option<u32> {
        if !self.in_range(gv) {
            return None;
        }
        let idx = self.index[self.storage_index(gv) as usize];
        (idx != NO_CELL).then_some(idx)
    }

    fn ensure_cell(&mut self, gv: [i64; 3]) -> u32 {
        debug_assert!(self.in_range(gv));
        let storage = self.storage_index(gv) as usize;
        let existing = self.index[storage];
        if existing != NO_CELL {
            debug_assert_eq!(self.cells[existing as usize].gv, gv, "stale cell in slot");
            return existing;
        }
        let cell = if let Some(free) = self.free.pop() {
            let meta = &mut self.cells[free as usize];
            meta.gv = gv;
            meta.live = 0;
            meta.in_use = true;
            free
        } else {
            let id = self.cells.len() as u32;
            self.cells.push(CellMeta {
                gv,
                generation: 0,
                live: 0,
                in_use: true,
            });
            self.pool.extend(std::iter::repeat(INVALID_PARTICLE).take(self.capacity));
            id
        };
        self.index[storage] = cell;
        cell
    }

    fn free_cell(&mut self, cell: u32) {
        debug_assert!(self.cells[cell as usize].in_use);
        let gv = self.cells[cell as usize].gv;
        let storage = self.storage_index(gv) as usize;
        let meta = &mut self.cells[cell as usize];
        meta.in_use = false;
        meta.generation = meta.generation.wrapping_add(1);
        meta.live = 0;
        let base = cell as usize * self.capacity;
        for slot in &mut self.pool[base..base + self.capacity] {
            slot.valid = false;
        }
        if self.index[storage] == cell {
            self.index[storage] = NO_CELL;
        }
        self.free.push(cell);
    }

    pub fn slots(&self, cell: u32) -> &[Particle] {
        let base = cell as usize * self.capacity;
        &self.pool[base..base + self.capacity]
    }

    fn slots_mut(&mut self, cell: u32) -> &mut [Particle] {
        let base = cell as usize * self.capacity;
        &mut self.pool[base..base + self.capacity]
    }

    pub fn cell_voxel(&self, cell: u32) -> [i64; 3] {
        self.cells[cell as usize].gv
    }

    pub fn cell_generation(&self, cell: u32) -> u32 {
        self.cells[cell as usize].generation
    }

    pub fn live_count(&self, cell: u32) -> usize {
        self.cells[cell as usize].live as usize
    }

    /// Resolves a reference, returning the particle only if the cell
    /// generation matches and the slot holds a valid particle.
    pub fn resolve(&self, r: ParticleRef) -> Option<&Particle> {
        let meta = self.cells.get(r.cell as usize)?;
        if !meta.in_use || meta.generation != r.generation {
            return None;
        }
        let p = &self.pool[r.cell as usize * self.capacity + r.slot as usize];
        p.valid.then_some(p)
    }

    pub fn resolve_mut(&mut self, r: ParticleRef) -> Option<&mut Particle> {
        let meta = self.cells.get(r.cell as usize)?;
        if !meta.in_use || meta.generation != r.generation {
            return None;
        }
        let p = &mut self.pool[r.cell as usize * self.capacity + r.slot as usize];
        p.valid.then_some(p)
    }

    /// Marks the referenced particle invalid. Returns it if it was live.
    pub fn invalidate(&mut self, r: ParticleRef) -> Option<Particle> {
        let meta = self.cells.get(r.cell as usize)?;
        if !meta.in_use || meta.generation != r.generation {
            return None;
        }
        let p = &mut self.pool[r.cell as usize * self.capacity + r.slot as usize];
        if !p.valid {
            return None;
        }
        let out = *p;
        p.valid = false;
        self.cells[r.cell as usize].live -= 1;
        Some(out)
    }

    /// Inserts a particle, resampling the target cell when full. Resampling
    /// protects particles born at `current_step` (they are excluded from the
    /// halving) and preserves the cell's weight sum.
    pub fn insert_particle(
        &mut self,
        p: Particle,
        current_step: u32,
        rng: &mut impl Rng,
    ) -> InsertOutcome {
        debug_assert!(p.valid && p.weight >= 0.0);
        let gv = self.global_voxel_of(&p.position);
        if !self.in_range(gv) {
            return InsertOutcome::Discarded(DiscardReason::OutOfRange);
        }
        let cell = self.ensure_cell(gv);
        let mut resampled = false;
        if self.live_count(cell) >= self.capacity {
            self.resample_cell_protected(cell, Some(current_step), rng);
            resampled = true;
            if self.live_count(cell) >= self.capacity {
                return InsertOutcome::Discarded(DiscardReason::CellFull);
            }
        }
        let generation = self.cells[cell as usize].generation;
        let slots = self.slots_mut(cell);
        let slot = slots
            .iter()
            .position(|s| !s.valid)
            .expect("cell below capacity has a free slot") as u8;
        slots[slot as usize] = p;
        self.cells[cell as usize].live += 1;
        let r = ParticleRef {
            cell,
            generation,
            slot,
        };
        if resampled {
            InsertOutcome::ResampledThenAccepted(r)
        } else {
            InsertOutcome::Accepted(r)
        }
    }

    /// Weight-proportional halving of a cell's live particles, preserving the
    /// cell's total weight. Particles born at `protect_step` are left alone.
    /// Survivors are drawn with replacement proportional to weight, so
    /// higher-weight particles survive or duplicate more often; every
    /// survivor's weight is rescaled to `total / n_survivors`.
    ///
    /// Bumps the cell generation: outstanding references into the cell go
    /// stale rather than silently pointing at reshuffled slots.
    pub fn resample_cell_protected(
        &mut self,
        cell: u32,
        protect_step: Option<u32>,
        rng: &mut impl Rng,
    ) {
        let capacity = self.capacity;
        let base = cell as usize * capacity;
        let mut candidates: Vec<usize> = Vec::with_capacity(capacity);
        for slot in 0..capacity {
            let p = &self.pool[base + slot];
            if p.valid && protect_step.map_or(true, |s| p.born_step != s) {
                candidates.push(slot);
            }
        }
        let n = candidates.len();
        if n <= 1 {
            return;
        }
        let n_target = (n / 2).max(1);
        let total: f64 = candidates.iter().map(|&s| self.pool[base + s].weight).sum();
        let mut selected: Vec<Particle> = Vec::with_capacity(n_target);
        if total > 0.0 {
            let cumulative: Vec<f64> = candidates
                .iter()
                .scan(0.0, |acc, &s| {
                    *acc += self.pool[base + s].weight;
                    Some(*acc)
                })
                .collect();
            let share = total / n_target as f64;
            for _ in 0..n_target {
                let r = rng.gen::<f64>() * total;
                let k = cumulative.partition_point(|&c| c <= r).min(n - 1);
                let mut survivor = self.pool[base + candidates[k]];
                survivor.weight = share;
                selected.push(survivor);
            }
        } else {
            // All weights zero: keep the first half deterministically.
            for &s in candidates.iter().take(n_target) {
                selected.push(self.pool[base + s]);
            }
        }
        for &s in &candidates {
            self.pool[base + s].valid = false;
        }
        let mut write = 0usize;
        for slot in 0..capacity {
            if !self.pool[base + slot].valid {
                if write == selected.len() {
                    break;
                }
                self.pool[base + slot] = selected[write];
                write += 1;
            }
        }
        debug_assert_eq!(write, selected.len());
        let meta = &mut self.cells[cell as usize];
        meta.live = meta.live - n as u8 + selected.len() as u8;
        meta.generation = meta.generation.wrapping_add(1);
    }

    /// Shifts the window so that `new_center` is at its middle. Whole-voxel
    /// motion scrolls the buffer (clearing cells that leave the window);
    /// sub-voxel motion accumulates in the anchor residual. Surviving
    /// particles keep their world positions.
    pub fn recenter(&mut self, new_center: &Point3<f64>) -> RecenterReport {
        let half = self.extent() / 2.0;
        let mut shift = [0i64; 3];
        let mut new_origin = self.origin_voxel;
        for a in 0..3 {
            let desired = new_center[a] - half;
            let v = (desired / self.l_voxel).floor();
            new_origin[a] = v as i64;
            shift[a] = new_origin[a] - self.origin_voxel[a];
            self.anchor_residual[a] = desired - v * self.l_voxel;
        }
        if shift == [0, 0, 0] {
            return RecenterReport::default();
        }
        self.origin_voxel = new_origin;
        let mut cells_cleared = 0;
        let mut particles_cleared = 0;
        for cell in 0..self.cells.len() as u32 {
            let meta = self.cells[cell as usize];
            if meta.in_use && !self.in_range(meta.gv) {
                particles_cleared += meta.live as usize;
                // The index slot may already belong to the entering voxel's
                // storage position; free_cell clears it via the OLD gv, which
                // shares the slot by construction.
                self.free_cell_out_of_window(cell);
                cells_cleared += 1;
            }
        }
        let overlap: i64 = (0..3)
            .map(|a| (self.side - shift[a].abs()).max(0))
            .product();
        let voxels_exchanged = (self.side.pow(3) - overlap) as usize;
        RecenterReport {
            shift,
            voxels_exchanged,
            cells_cleared,
            particles_cleared,
        }
    }

    fn free_cell_out_of_window(&mut self, cell: u32) {
        let meta = &mut self.cells[cell as usize];
        meta.in_use = false;
        meta.generation = meta.generation.wrapping_add(1);
        meta.live = 0;
        let gv = meta.gv;
        let base = cell as usize * self.capacity;
        for slot in &mut self.pool[base..base + self.capacity] {
            slot.valid = false;
        }
        // Same storage slot as the entering voxel: clear it.
        let s = [
            gv[0].rem_euclid(self.side) as u64,
            gv[1].rem_euclid(self.side) as u64,
            gv[2].rem_euclid(self.side) as u64,
        ];
        let storage = morton_encode(s[0], s[1], s[2]).unwrap() as usize;
        if self.index[storage] == cell {
            self.index[storage] = NO_CELL;
        }
        self.free.push(cell);
    }

    /// Removes and returns every live particle whose instance ID is in `ids`.
    /// Used for whole-frame relocation of instances of interest.
    pub fn extract_by_instance(&mut self, ids: &dyn Fn(InstanceId) -> bool) -> Vec<Particle> {
        let mut out = Vec::new();
        for cell in 0..self.cells.len() {
            if !self.cells[cell].in_use || self.cells[cell].live == 0 {
                continue;
            }
            let base = cell * self.capacity;
            let mut removed = 0u8;
            for slot in 0..self.capacity {
                let p = &mut self.pool[base + slot];
                if p.valid && ids(p.instance_id) {
                    out.push(*p);
                    p.valid = false;
                    removed += 1;
                }
            }
            self.cells[cell].live -= removed;
        }
        out
    }

    /// Multiplies every live particle's weight by `factor`.
    pub fn scale_all_weights(&mut self, factor: f64) {
        if factor == 1.0 {
            return;
        }
        for cell in 0..self.cells.len() {
            if !self.cells[cell].in_use {
                continue;
            }
            let base = cell * self.capacity;
            for slot in 0..self.capacity {
                let p = &mut self.pool[base + slot];
                if p.valid {
                    p.weight *= factor;
                }
            }
        }
    }

    /// Sum of live particle weights in the voxel containing `gv`.
    pub fn weight_sum(&self, gv: [i64; 3]) -> f64 {
        match self.cell_at(gv) {
            Some(cell) => self
                .slots(cell)
                .iter()
                .filter(|p| p.valid)
                .map(|p| p.weight)
                .sum(),
            None => 0.0,
        }
    }

    /// Per-instance weight sums in the voxel containing `gv`.
    pub fn weight_sum_by_id(&self, gv: [i64; 3]) -> BTreeMap<InstanceId, f64> {
        let mut out = BTreeMap::new();
        if let Some(cell) = self.cell_at(gv) {
            for p in self.slots(cell).iter().filter(|p| p.valid) {
                *out.entry(p.instance_id).or_insert(0.0) += p.weight;
            }
        }
        out
    }

    /// Iterates in-use cells as `(cell, global voxel)` in slab order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (u32, [i64; 3])> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, m)| m.in_use)
            .map(|(i, m)| (i as u32, m.gv))
    }

    /// Iterates live particles in Morton storage order (deterministic).
    pub fn iter_particles_ordered(&self) -> impl Iterator<Item = (u64, &Particle)> + '_ {
        self.index
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != NO_CELL)
            .flat_map(move |(storage, &c)| {
                self.slots(c)
                    .iter()
                    .filter(|p| p.valid)
                    .map(move |p| (storage as u64, p))
            })
    }

    pub fn total_live_particles(&self) -> usize {
        self.cells
            .iter()
            .filter(|m| m.in_use)
            .map(|m| m.live as usize)
            .sum()
    }

    /// Frees cells that hold no live particles.
    pub fn prune_empty_cells(&mut self) -> usize {
        let mut freed = 0;
        for cell in 0..self.cells.len() as u32 {
            let meta = self.cells[cell as usize];
            if meta.in_use && meta.live == 0 {
                self.free_cell(cell);
                freed += 1;
            }
        }
        freed
    }

    /// Serializes a snapshot: text header, `---` separator, then one binary
    /// little-endian record per live particle in Morton order:
    /// cell storage index (u64), position (3 x f64), weight (f64),
    /// instance_id (u32), last_match_step (u32).
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<(), GridError> {
        writeln!(w, "phdmap-snapshot v1")?;
        writeln!(w, "m {}", self.m)?;
        writeln!(w, "voxel {}", self.l_voxel)?;
        writeln!(
            w,
            "anchor {} {} {} {} {} {}",
            self.origin_voxel[0],
            self.origin_voxel[1],
            self.origin_voxel[2],
            self.anchor_residual[0],
            self.anchor_residual[1],
            self.anchor_residual[2]
        )?;
        writeln!(w, "count {}", self.total_live_particles())?;
        writeln!(w, "---")?;
        for (storage, p) in self.iter_particles_ordered() {
            w.write_all(&storage.to_le_bytes())?;
            for c in [p.position.x, p.position.y, p.position.z, p.weight] {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(&p.instance_id.to_le_bytes())?;
            w.write_all(&p.last_match_step.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the records of a snapshot written by [`write_snapshot`](Self::write_snapshot).
    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<SnapshotData, GridError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let sep = b"---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| GridError::BadSnapshot("missing --- separator".into()))?;
        let header = std::str::from_utf8(&bytes[..pos])
            .map_err(|_| GridError::BadSnapshot("non-utf8 header".into()))?;
        let mut m = None;
        let mut voxel = None;
        let mut count = None;
        for line in header.lines() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("m") => m = it.next().and_then(|v| v.parse().ok()),
                Some("voxel") => voxel = it.next().and_then(|v| v.parse().ok()),
                Some("count") => count = it.next().and_then(|v| v.parse().ok()),
                _ => {}
            }
        }
        let (m, voxel, count): (u32, f64, usize) = (
            m.ok_or_else(|| GridError::BadSnapshot("missing m".into()))?,
            voxel.ok_or_else(|| GridError::BadSnapshot("missing voxel".into()))?,
            count.ok_or_else(|| GridError::BadSnapshot("missing count".into()))?,
        );
        let mut records = Vec::with_capacity(count);
        let mut cur = &bytes[pos + sep.len()..];
        const REC: usize = 8 + 32 + 4 + 4;
        if cur.len() != count * REC {
            return Err(GridError::BadSnapshot(format!(
                "expected {} record bytes, found {}",
                count * REC,
                cur.len()
            )));
        }
        for _ in 0..count {
            let storage = u64::from_le_bytes(cur[0..8].try_into().unwrap());
            let mut f = [0.0f64; 4];
            for (i, fv) in f.iter_mut().enumerate() {
                *fv = f64::from_le_bytes(cur[8 + i * 8..16 + i * 8].try_into().unwrap());
            }
            let instance_id = u32::from_le_bytes(cur[40..44].try_into().unwrap());
            let last_match_step = u32::from_le_bytes(cur[44..48].try_into().unwrap());
            records.push(SnapshotRecord {
                storage,
                position: Point3::new(f[0], f[1], f[2]),
                weight: f[3],
                instance_id,
                last_match_step,
            });
            cur = &cur[REC..];
        }
        Ok(SnapshotData { m, voxel, records })
    }
}

const INVALID_PARTICLE: Particle = Particle {
    position: Point3::new(0.0, 0.0, 0.0),
    instance_id: 0,
    weight: 0.0,
    last_match_step: 0,
    born_step: 0,
    template_unconfirmed: false,
    valid: false,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub storage: u64,
    pub position: Point3<f64>,
    pub weight: f64,
    pub instance_id: InstanceId,
    pub last_match_step: u32,
}

#[derive(Debug, Clone)]
pub struct SnapshotData {
    pub m: u32,
    pub voxel: f64,
    pub records: Vec<SnapshotRecord>,
}

/// Per-instance bookkeeping: semantic label, transform history, particle
/// references and movability.
#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub instance_id: InstanceId,
    pub semantic_label: u32,
    pub movable: bool,
    /// Recent per-step relative transforms `(step, T)`, newest last.
    pub transforms: VecDeque<(u32, RigidTransform)>,
    pub particles: Vec<ParticleRef>,
    pub zero_streak: u32,
    /// Set once the instance has been stored as a memory template.
    pub templated: bool,
    pub last_observed_step: u32,
}

/// Instance hash map. Background instances are static by contract: they never
/// receive a non-identity transform.
#[derive(Debug, Clone)]
pub struct InstanceRegistry {
    records: BTreeMap<InstanceId, InstanceRecord>,
    /// Frames an instance may hold zero particles before being collected.
    pub gc_frames: u32,
    /// Transform history length per instance.
    pub history_len: usize,
}

impl Default for InstanceRegistry {
    fn default() -> Self {
        Self {
            records: BTreeMap::new(),
            gc_frames: 10,
            history_len: 8,
        }
    }
}

impl InstanceRegistry {
    pub fn observe(
        &mut self,
        instance_id: InstanceId,
        semantic_label: u32,
        movable: bool,
        step: u32,
    ) -> &mut InstanceRecord {
        let rec = self
            .records
            .entry(instance_id)
            .or_insert_with(|| InstanceRecord {
                instance_id,
                semantic_label,
                movable,
                transforms: VecDeque::new(),
                particles: Vec::new(),
                zero_streak: 0,
                templated: false,
                last_observed_step: step,
            });
        rec.last_observed_step = rec.last_observed_step.max(step);
        rec
    }

    pub fn get(&self, instance_id: InstanceId) -> Option<&InstanceRecord> {
        self.records.get(&instance_id)
    }

    pub fn get_mut(&mut self, instance_id: InstanceId) -> Option<&mut InstanceRecord> {
        self.records.get_mut(&instance_id)
    }

    pub fn contains(&self, instance_id: InstanceId) -> bool {
        self.records.contains_key(&instance_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&InstanceId, &InstanceRecord)> {
        self.records.iter()
    }

    /// Appends a transform to an instance's history. Rejects non-identity
    /// transforms for background (non-movable) instances.
    pub fn push_transform(
        &mut self,
        instance_id: InstanceId,
        step: u32,
        t: RigidTransform,
    ) -> Result<(), GridError> {
        let history_len = self.history_len;
        let rec = self
            .records
            .get_mut(&instance_id)
            .ok_or(GridError::UnknownInstance(instance_id))?;
        if !rec.movable && t.max_abs_diff(&RigidTransform::identity()) > 1e-12 {
            return Err(GridError::BackgroundTransform(instance_id));
        }
        rec.transforms.push_back((step, t));
        while rec.transforms.len() > history_len {
            rec.transforms.pop_front();
        }
        Ok(())
    }

    /// Rebuilds every record's particle reference list from the grid and
    /// garbage-collects instances with a long streak of zero particles.
    /// Call once per frame after all mutations.
    pub fn compact(&mut self, grid: &VoxelGrid) -> Vec<InstanceId> {
        for rec in self.records.values_mut() {
            rec.particles.clear();
        }
        for (cell, _) in grid.iter_cells() {
            let generation = grid.cell_generation(cell);
            for (slot, p) in grid.slots(cell).iter().enumerate() {
                if p.valid {
                    if let Some(rec) = self.records.get_mut(&p.instance_id) {
                        rec.particles.push(ParticleRef {
                            cell,
                            generation,
                            slot: slot as u8,
                        });
                    }
                }
            }
        }
        let gc = self.gc_frames;
        let mut removed = Vec::new();
        self.records.retain(|id, rec| {
            if rec.particles.is_empty() {
                rec.zero_streak += 1;
            } else {
                rec.zero_streak = 0;
            }
            let keep = rec.zero_streak < gc;
            if !keep {
                removed.push(*id);
            }
            keep
        });
        removed
    }
}

/// Transforms every live particle of `instance_id` (per the registry's
/// reference list) and reinserts it at its new voxel. Stale references are
/// skipped. The registry's list is rebuilt with the surviving references.
pub fn relocate_instance_particles(
    grid: &mut VoxelGrid,
    registry: &mut InstanceRegistry,
    instance_id: InstanceId,
    transform: &RigidTransform,
    current_step: u32,
    rng: &mut impl Rng,
) -> Result<MoveReport, GridError> {
    let refs: Vec<ParticleRef> = registry
        .get(instance_id)
        .ok_or(GridError::UnknownInstance(instance_id))?
        .particles
        .clone();
    let mut extracted = Vec::with_capacity(refs.len());
    for r in refs {
        if grid
            .resolve(r)
            .map_or(false, |p| p.instance_id == instance_id)
        {
            if let Some(p) = grid.invalidate(r) {
                extracted.push(p);
            }
        }
    }
    let mut report = MoveReport::default();
    let mut new_refs = Vec::with_capacity(extracted.len());
    for mut p in extracted {
        p.position = transform.apply(&p.position);
        match grid.insert_particle(p, current_step, rng) {
            InsertOutcome::Accepted(r) | InsertOutcome::ResampledThenAccepted(r) => {
                report.moved += 1;
                new_refs.push(r);
            }
            InsertOutcome::Discarded(DiscardReason::OutOfRange) => {
                report.discarded_out_of_range += 1
            }
            InsertOutcome::Discarded(DiscardReason::CellFull) => report.discarded_full += 1,
        }
    }
    registry
        .get_mut(instance_id)
        .expect("checked above")
        .particles = new_refs;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use nalgebra::Vector3;

    fn grid_64(center: [f64; 3]) -> VoxelGrid {
        VoxelGrid::new(6, 0.2, 8, &Point3::new(center[0], center[1], center[2])).unwrap()
    }

    fn particle_at(x: f64, y: f64, z: f64, id: InstanceId, w: f64) -> Particle {
        Particle::new(Point3::new(x, y, z), id, w, 0)
    }

    #[test]
    fn insert_into_empty_cell_accepted() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(1, Stream::Test, 0);
        let out = g.insert_particle(particle_at(0.1, 0.1, 0.1, 3, 0.5), 0, &mut rng);
        assert!(matches!(out, InsertOutcome::Accepted(_)));
        assert_eq!(g.weight_sum([0, 0, 0]), 0.5);
        assert_eq!(g.total_live_particles(), 1);
    }

    #[test]
    fn insert_out_of_range_discarded() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(1, Stream::Test, 0);
        let out = g.insert_particle(particle_at(100.0, 0.0, 0.0, 3, 0.5), 0, &mut rng);
        assert_eq!(out, InsertOutcome::Discarded(DiscardReason::OutOfRange));
    }

    #[test]
    fn insert_into_full_cell_resamples_to_half_then_accepts() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(2, Stream::Test, 0);
        for i in 0..8 {
            let mut p = particle_at(0.05, 0.05, 0.05, 3, 0.1 * (i + 1) as f64);
            p.born_step = 0;
            assert!(matches!(
                g.insert_particle(p, 0, &mut rng),
                InsertOutcome::Accepted(_)
            ));
        }
        let total_before = g.weight_sum([0, 0, 0]);
        // Next insert happens at step 1, so existing particles are unprotected.
        let out = g.insert_particle(particle_at(0.05, 0.05, 0.05, 3, 0.7), 1, &mut rng);
        assert!(matches!(out, InsertOutcome::ResampledThenAccepted(_)));
        // 8 old halved to 4, plus the new one.
        assert_eq!(g.live_count(g.cell_at([0, 0, 0]).unwrap()), 5);
        let total_after = g.weight_sum([0, 0, 0]);
        assert!(
            ((total_after - 0.7) - total_before).abs() <= 1e-12 * total_before.max(1.0),
            "old weight not preserved: {total_before} vs {}",
            total_after - 0.7
        );
    }

    #[test]
    fn full_cell_of_protected_newborns_discards() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(3, Stream::Test, 0);
        for _ in 0..8 {
            let mut p = particle_at(0.05, 0.05, 0.05, 3, 0.1);
            p.born_step = 5;
            g.insert_particle(p, 5, &mut rng);
        }
        let mut p = particle_at(0.05, 0.05, 0.05, 3, 0.1);
        p.born_step = 5;
        let out = g.insert_particle(p, 5, &mut rng);
        assert_eq!(out, InsertOutcome::Discarded(DiscardReason::CellFull));
    }

    #[test]
    fn weight_sums_by_id() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(4, Stream::Test, 0);
        g.insert_particle(particle_at(0.1, 0.1, 0.1, 2, 0.3), 0, &mut rng);
        g.insert_particle(particle_at(0.1, 0.1, 0.1, 7, 0.5), 0, &mut rng);
        assert_eq!(g.weight_sum([0, 0, 0]), 0.8);
        let by_id = g.weight_sum_by_id([0, 0, 0]);
        assert_eq!(by_id[&2], 0.3);
        assert_eq!(by_id[&7], 0.5);
        assert_eq!(g.weight_sum([5, 5, 5]), 0.0);
        assert!(g.weight_sum_by_id([5, 5, 5]).is_empty());
        // Per-ID sums add up to the total exactly.
        let total: f64 = by_id.values().sum();
        assert_eq!(total, g.weight_sum([0, 0, 0]));
    }

    #[test]
    fn recenter_zero_motion_is_noop() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let origin = g.origin_voxel();
        let report = g.recenter(&Point3::new(0.0, 0.0, 0.0));
        assert_eq!(report, RecenterReport::default());
        assert_eq!(g.origin_voxel(), origin);
    }

    #[test]
    fn recenter_half_voxel_accumulates_residual_without_shift() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let origin = g.origin_voxel();
        let report = g.recenter(&Point3::new(0.1, 0.0, 0.0));
        assert_eq!(report.shift, [0, 0, 0]);
        assert_eq!(g.origin_voxel(), origin);
        assert!((g.anchor_residual()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn recenter_one_voxel_clears_one_plane_and_keeps_world_positions() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(5, Stream::Test, 0);
        // One particle near the low-x edge (will scroll out), one in the middle.
        let lo = g.origin_voxel();
        let edge_x = (lo[0] as f64 + 0.5) * g.l_voxel();
        g.insert_particle(particle_at(edge_x, 0.1, 0.1, 1, 1.0), 0, &mut rng);
        g.insert_particle(particle_at(0.1, 0.1, 0.1, 1, 1.0), 0, &mut rng);
        let surviving_before: Vec<Point3<f64>> = g
            .iter_particles_ordered()
            .map(|(_, p)| p.position)
            .filter(|p| p.x > edge_x + 0.1)
            .collect();
        let report = g.recenter(&Point3::new(0.2, 0.0, 0.0));
        assert_eq!(report.shift, [1, 0, 0]);
        assert_eq!(report.voxels_exchanged, 64 * 64);
        assert_eq!(report.particles_cleared, 1);
        let surviving_after: Vec<Point3<f64>> =
            g.iter_particles_ordered().map(|(_, p)| p.position).collect();
        assert_eq!(surviving_before, surviving_after);
    }

    #[test]
    fn membership_consistent_after_recenter() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(6, Stream::Test, 0);
        for i in 0..200 {
            let x = (i as f64 * 0.37).sin() * 5.0;
            let y = (i as f64 * 0.73).cos() * 5.0;
            let z = (i as f64 * 0.11).sin() * 5.0;
            g.insert_particle(particle_at(x, y, z, 1, 1.0), 0, &mut rng);
        }
        g.recenter(&Point3::new(1.3, -0.7, 2.9));
        for (cell, gv) in g.iter_cells().collect::<Vec<_>>() {
            for p in g.slots(cell).iter().filter(|p| p.valid) {
                assert_eq!(g.global_voxel_of(&p.position), gv, "stale membership");
                // Lookup by position and by storage code agree.
                let code = g.storage_index(gv);
                assert_eq!(g.voxel_of_storage(code), gv);
            }
        }
    }

    #[test]
    fn relocate_identity_changes_nothing() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut reg = InstanceRegistry::default();
        let mut rng = derive(7, Stream::Test, 0);
        reg.observe(3, 1, true, 0);
        g.insert_particle(particle_at(0.3, 0.3, 0.3, 3, 1.0), 0, &mut rng);
        reg.compact(&g);
        let before: Vec<_> = g.iter_particles_ordered().map(|(s, p)| (s, *p)).collect();
        let report = relocate_instance_particles(
            &mut g,
            &mut reg,
            3,
            &RigidTransform::identity(),
            1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.moved, 1);
        let after: Vec<_> = g.iter_particles_ordered().map(|(s, p)| (s, *p)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn relocate_two_voxels_shifts_indices() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut reg = InstanceRegistry::default();
        let mut rng = derive(8, Stream::Test, 0);
        reg.observe(3, 1, true, 0);
        for i in 0..5 {
            g.insert_particle(
                particle_at(0.1 + 0.25 * i as f64, 0.1, 0.3, 3, 1.0),
                0,
                &mut rng,
            );
        }
        reg.compact(&g);
        let before: Vec<[i64; 3]> = g
            .iter_particles_ordered()
            .map(|(_, p)| g.global_voxel_of(&p.position))
            .collect();
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.4, 0.0));
        let report = relocate_instance_particles(&mut g, &mut reg, 3, &t, 1, &mut rng).unwrap();
        assert_eq!(report.moved, 5);
        let mut after: Vec<[i64; 3]> = g
            .iter_particles_ordered()
            .map(|(_, p)| g.global_voxel_of(&p.position))
            .collect();
        let mut expected: Vec<[i64; 3]> =
            before.iter().map(|v| [v[0], v[1] + 2, v[2]]).collect();
        after.sort();
        expected.sort();
        assert_eq!(after, expected);
    }

    #[test]
    fn relocate_outside_grid_discards() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut reg = InstanceRegistry::default();
        let mut rng = derive(9, Stream::Test, 0);
        reg.observe(3, 1, true, 0);
        g.insert_particle(particle_at(6.0, 0.1, 0.1, 3, 1.0), 0, &mut rng);
        g.insert_particle(particle_at(0.1, 0.1, 0.1, 3, 1.0), 0, &mut rng);
        reg.compact(&g);
        let t = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let report = relocate_instance_particles(&mut g, &mut reg, 3, &t, 1, &mut rng).unwrap();
        assert_eq!(report.moved, 1);
        assert_eq!(report.discarded_out_of_range, 1);
    }

    #[test]
    fn relocate_unknown_instance_errors() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut reg = InstanceRegistry::default();
        let mut rng = derive(10, Stream::Test, 0);
        let err = relocate_instance_particles(
            &mut g,
            &mut reg,
            99,
            &RigidTransform::identity(),
            0,
            &mut rng,
        );
        assert!(matches!(err, Err(GridError::UnknownInstance(99))));
    }

    #[test]
    fn background_rejects_non_identity_transform() {
        let mut reg = InstanceRegistry::default();
        reg.observe(1, 1, false, 0);
        let t = RigidTransform::from_translation(Vector3::new(0.1, 0.0, 0.0));
        assert!(matches!(
            reg.push_transform(1, 1, t),
            Err(GridError::BackgroundTransform(1))
        ));
        assert!(reg.push_transform(1, 1, RigidTransform::identity()).is_ok());
    }

    #[test]
    fn registry_gc_collects_empty_instances() {
        let g = grid_64([0.0, 0.0, 0.0]);
        let mut reg = InstanceRegistry::default();
        reg.gc_frames = 3;
        reg.observe(7, 1, true, 0);
        for _ in 0..2 {
            let removed = reg.compact(&g);
            assert!(removed.is_empty());
        }
        let removed = reg.compact(&g);
        assert_eq!(removed, vec![7]);
        assert!(!reg.contains(7));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut g = grid_64([0.0, 0.0, 0.0]);
        let mut rng = derive(11, Stream::Test, 0);
        g.insert_particle(particle_at(0.3, -0.4, 1.2, 5, 0.25), 2, &mut rng);
        g.insert_particle(particle_at(-1.0, 0.2, 0.4, 9, 0.75), 2, &mut rng);
        let mut buf = Vec::new();
        g.write_snapshot(&mut buf).unwrap();
        let data = VoxelGrid::read_snapshot(&mut &buf[..]).unwrap();
        assert_eq!(data.m, 6);
        assert_eq!(data.records.len(), 2);
        let rec: Vec<_> = data
            .records
            .iter()
            .map(|r| (r.instance_id, r.weight))
            .collect();
        assert!(rec.contains(&(5, 0.25)));
        assert!(rec.contains(&(9, 0.75)));
        for r in &data.records {
            let gv = g.voxel_of_storage(r.storage);
            assert_eq!(g.global_voxel_of(&r.position), gv);
        }
    }
}
