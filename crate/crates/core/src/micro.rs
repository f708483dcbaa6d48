//! Voxel phase maps: benchmark geometries and binary I/O.
//!
//! Generators are single-threaded and deterministic from their arguments
//! (and seed); maps are immutable data afterwards. Voxel membership uses a
//! center-point test — a voxel belongs to a sphere iff its center does —
//! matching the sharp-interface voxel discretization used by the solver.
//!
//! The on-disk format ("DBFM") is a small self-describing little-endian
//! binary: magic `DBFM`, version u16, grid sizes as three u32, cell edge
//! lengths as three f64, phase count u16, then the per-voxel phase ids as
//! u16 in x-fastest order.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::errors::{CoreError, Result};
use crate::grid::GridShape;

const MAGIC: [u8; 4] = *b"DBFM";
const VERSION: u16 = 1;

/// Total candidate draws allowed to the random placer before reporting a
/// jam. Five spheres at 20% porosity sit far from jamming, so exhausting
/// this budget indicates an over-packed request.
pub const PLACEMENT_ATTEMPT_BUDGET: usize = 1_000_000;

/// Per-voxel phase assignment on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMap {
    shape: GridShape,
    phase_count: u16,
    ids: Vec<u16>,
}

impl PhaseMap {
    pub fn new(shape: GridShape, phase_count: u16, ids: Vec<u16>) -> Result<PhaseMap> {
        if ids.len() != shape.nvox() {
            return Err(CoreError::InvalidMicrostructure(format!(
                "phase array has {} entries, grid has {} voxels",
                ids.len(),
                shape.nvox()
            )));
        }
        if phase_count == 0 {
            return Err(CoreError::InvalidMicrostructure(
                "phase count must be at least 1".into(),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= phase_count) {
            return Err(CoreError::InvalidMicrostructure(format!(
                "phase id {bad} out of range for {phase_count} phases"
            )));
        }
        Ok(PhaseMap {
            shape,
            phase_count,
            ids,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn phase_count(&self) -> u16 {
        self.phase_count
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    /// Fraction of voxels carrying each phase id; sums to one exactly up to
    /// the final divisions.
    pub fn volume_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0_usize; self.phase_count as usize];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        let n = self.ids.len() as f64;
        counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// Sphere radius producing `vf` volume fraction inside a cell of volume V.
fn radius_from_volume_fraction(vf: f64, cell_volume: f64) -> f64 {
    (3.0 * vf * cell_volume / (4.0 * PI)).cbrt()
}

fn min_image_dist2(a: [f64; 3], b: [f64; 3], l: [f64; 3]) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let mut d = (a[k] - b[k]).abs() % l[k];
        if d > 0.5 * l[k] {
            d = l[k] - d;
        }
        d2 += d * d;
    }
    d2
}

/// Two-phase map with a single sphere (phase 1) centered in the cell,
/// radius chosen analytically for the target volume fraction.
///
/// Requires 0 < vf < pi/6 so the sphere fits a cubic cell; for non-cubic
/// cells the diameter must additionally not exceed the shortest edge.
pub fn sphere_inclusion(shape: GridShape, vf: f64) -> Result<PhaseMap> {
    if !(vf.is_finite() && vf > 0.0 && vf < PI / 6.0) {
        return Err(CoreError::InvalidMicrostructure(format!(
            "sphere volume fraction must lie in (0, pi/6), got {vf}"
        )));
    }
    let volume: f64 = shape.l.iter().product();
    let r = radius_from_volume_fraction(vf, volume);
    let min_l = shape.l.iter().cloned().fold(f64::INFINITY, f64::min);
    if 2.0 * r > min_l {
        return Err(CoreError::InvalidMicrostructure(format!(
            "sphere of radius {r} does not fit the shortest cell edge {min_l}"
        )));
    }
    let center = [0.5 * shape.l[0], 0.5 * shape.l[1], 0.5 * shape.l[2]];
    let r2 = r * r;
    let mut ids = vec![0_u16; shape.nvox()];
    for (v, id) in ids.iter_mut().enumerate() {
        let c = shape.center(shape.coords(v));
        if min_image_dist2(c, center, shape.l) < r2 {
            *id = 1;
        }
    }
    PhaseMap::new(shape, 2, ids)
}

/// Equal-radius non-overlapping spheres (phase 1) placed by seeded
/// rejection sampling with periodic wrap-around.
///
/// The radius comes from `porosity / count` per sphere. Placement draws
/// centers uniformly and rejects any candidate whose periodic minimum-image
/// distance to an accepted center is below one diameter; exhausting the
/// attempt budget reports a jam and suggests fewer or smaller spheres.
pub fn random_spheres(shape: GridShape, count: usize, porosity: f64, seed: u64) -> Result<PhaseMap> {
    let (centers, r) = random_sphere_centers(shape, count, porosity, seed)?;
    let r2 = r * r;
    let mut ids = vec![0_u16; shape.nvox()];
    for (v, id) in ids.iter_mut().enumerate() {
        let c = shape.center(shape.coords(v));
        if centers
            .iter()
            .any(|&s| min_image_dist2(c, s, shape.l) < r2)
        {
            *id = 1;
        }
    }
    PhaseMap::new(shape, 2, ids)
}

/// Placement step of [`random_spheres`]: accepted centers and the common
/// radius, so overlap properties can be checked directly.
pub fn random_sphere_centers(
    shape: GridShape,
    count: usize,
    porosity: f64,
    seed: u64,
) -> Result<(Vec<[f64; 3]>, f64)> {
    if count == 0 {
        return Err(CoreError::InvalidMicrostructure(
            "sphere count must be at least 1".into(),
        ));
    }
    if !(porosity.is_finite() && porosity > 0.0 && porosity < 1.0) {
        return Err(CoreError::InvalidMicrostructure(format!(
            "porosity must lie in (0, 1), got {porosity}"
        )));
    }
    let volume: f64 = shape.l.iter().product();
    let r = radius_from_volume_fraction(porosity / count as f64, volume);
    let min_l = shape.l.iter().cloned().fold(f64::INFINITY, f64::min);
    if 2.0 * r > min_l {
        return Err(CoreError::InvalidMicrostructure(format!(
            "sphere of radius {r} overlaps its own periodic image (shortest edge {min_l}); \
             use fewer or smaller spheres"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(count);
    let d2 = 4.0 * r * r;
    let mut attempts = 0_usize;
    while centers.len() < count {
        if attempts >= PLACEMENT_ATTEMPT_BUDGET {
            return Err(CoreError::PackingJammed {
                placed: centers.len(),
                requested: count,
            });
        }
        attempts += 1;
        let cand = [
            rng.gen::<f64>() * shape.l[0],
            rng.gen::<f64>() * shape.l[1],
            rng.gen::<f64>() * shape.l[2],
        ];
        if centers
            .iter()
            .all(|&s| min_image_dist2(cand, s, shape.l) >= d2)
        {
            centers.push(cand);
        }
    }
    Ok((centers, r))
}

pub fn save_phase_map(map: &PhaseMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for k in 0..3 {
        w.write_all(&(map.shape.n[k] as u32).to_le_bytes())?;
    }
    for k in 0..3 {
        w.write_all(&map.shape.l[k].to_le_bytes())?;
    }
    w.write_all(&map.phase_count.to_le_bytes())?;
    for &id in &map.ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> CoreError {
    CoreError::MalformedPhaseMap(msg.into())
}

pub fn load_phase_map(path: impl AsRef<Path>) -> Result<PhaseMap> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0_u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| malformed("file too short for magic bytes"))?;
    if magic != MAGIC {
        return Err(malformed(format!("bad magic bytes {magic:?}")));
    }
    let mut b2 = [0_u8; 2];
    let mut b4 = [0_u8; 4];
    let mut b8 = [0_u8; 8];

    r.read_exact(&mut b2)
        .map_err(|_| malformed("truncated version field"))?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(malformed(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }

    let mut n = [0_usize; 3];
    for nk in n.iter_mut() {
        r.read_exact(&mut b4)
            .map_err(|_| malformed("truncated grid size"))?;
        *nk = u32::from_le_bytes(b4) as usize;
    }
    let mut l = [0.0_f64; 3];
    for lk in l.iter_mut() {
        r.read_exact(&mut b8)
            .map_err(|_| malformed("truncated cell length"))?;
        *lk = f64::from_le_bytes(b8);
    }
    for &nk in &n {
        if nk < 3 || nk % 2 == 0 {
            return Err(malformed(format!(
                "grid size {nk} is not an odd number >= 3"
            )));
        }
    }
    for &lk in &l {
        if !(lk.is_finite() && lk > 0.0) {
            return Err(malformed(format!("cell length {lk} is not positive")));
        }
    }

    r.read_exact(&mut b2)
        .map_err(|_| malformed("truncated phase count"))?;
    let phase_count = u16::from_le_bytes(b2);

    let shape = GridShape { n, l };
    let nvox = shape.nvox();
    let mut payload = vec![0_u8; nvox * 2];
    r.read_exact(&mut payload).map_err(|_| {
        malformed(format!(
            "payload shorter than the {nvox} voxels the header declares"
        ))
    })?;
    let mut trailing = [0_u8; 1];
    if r.read(&mut trailing).map_err(CoreError::Io)? != 0 {
        return Err(malformed("trailing bytes after the declared payload"));
    }

    let ids: Vec<u16> = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if let Some(&bad) = ids.iter().find(|&&id| id >= phase_count) {
        return Err(malformed(format!(
            "voxel phase id {bad} exceeds declared phase count {phase_count}"
        )));
    }
    PhaseMap::new(shape, phase_count, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, l: f64) -> GridShape {
        GridShape {
            n: [n; 3],
            l: [l; 3],
        }
    }

    #[test]
    fn sphere_volume_fraction_converges_on_fine_grid() {
        let map = sphere_inclusion(shape(63, 1.0), 0.2).unwrap();
        let vf = map.volume_fractions();
        assert_eq!(vf.len(), 2);
        assert!(
            vf[1] >= 0.195 && vf[1] <= 0.205,
            "discrete volume fraction {} outside [0.195, 0.205]",
            vf[1]
        );
        assert!((vf[0] + vf[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_sphere_is_the_single_center_voxel() {
        let n = 31;
        let map = sphere_inclusion(shape(n, 1.0), 1e-6).unwrap();
        let inclusion: Vec<usize> = map
            .ids()
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == 1)
            .map(|(v, _)| v)
            .collect();
        let mid = n / 2;
        assert_eq!(
            inclusion,
            vec![map.shape().index([mid, mid, mid])],
            "a vanishing sphere must capture exactly the central voxel"
        );
    }

    #[test]
    fn sphere_map_has_full_octahedral_symmetry() {
        let n = 31;
        let map = sphere_inclusion(shape(n, 1.0), 0.2).unwrap();
        let s = map.shape();
        // All 48 signed axis permutations, realized as index reflections
        // i -> n-1-i composed with axis permutations.
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for p in perms {
            for flips in 0..8_usize {
                for v in 0..s.nvox() {
                    let c = s.coords(v);
                    let mut t = [c[p[0]], c[p[1]], c[p[2]]];
                    for k in 0..3 {
                        if flips & (1 << k) != 0 {
                            t[k] = n - 1 - t[k];
                        }
                    }
                    assert_eq!(
                        map.ids()[v],
                        map.ids()[s.index(t)],
                        "symmetry {p:?}/{flips} broken at voxel {c:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn sphere_rejects_out_of_range_fractions() {
        assert!(sphere_inclusion(shape(9, 1.0), 0.0).is_err());
        assert!(sphere_inclusion(shape(9, 1.0), -0.1).is_err());
        assert!(sphere_inclusion(shape(9, 1.0), PI / 6.0).is_err());
        // Non-cubic cell: the same fraction may no longer fit the short edge.
        let stretched = GridShape {
            n: [9, 9, 9],
            l: [4.0, 0.25, 4.0],
        };
        assert!(sphere_inclusion(stretched, 0.5).is_err());
    }

    #[test]
    fn random_spheres_are_reproducible_and_seed_sensitive() {
        let s = shape(31, 1.0);
        let a = random_spheres(s, 5, 0.2, 42).unwrap();
        let b = random_spheres(s, 5, 0.2, 42).unwrap();
        assert_eq!(a, b, "same seed must give the identical map");
        let c = random_spheres(s, 5, 0.2, 43).unwrap();
        assert_ne!(a, c, "different seeds should move the spheres");
    }

    #[test]
    fn random_sphere_centers_obey_periodic_separation() {
        let s = shape(31, 1.0);
        for seed in [1_u64, 7, 42, 1234] {
            let (centers, r) = random_sphere_centers(s, 5, 0.2, seed).unwrap();
            assert_eq!(centers.len(), 5);
            for i in 0..centers.len() {
                for j in (i + 1)..centers.len() {
                    // Direct check over all 27 periodic images.
                    let mut best = f64::INFINITY;
                    for dx in -1_i32..=1 {
                        for dy in -1_i32..=1 {
                            for dz in -1..=1_i32 {
                                let shifted = [
                                    centers[j][0] + dx as f64 * s.l[0],
                                    centers[j][1] + dy as f64 * s.l[1],
                                    centers[j][2] + dz as f64 * s.l[2],
                                ];
                                let d2: f64 = (0..3)
                                    .map(|k| (centers[i][k] - shifted[k]).powi(2))
                                    .sum();
                                best = best.min(d2.sqrt());
                            }
                        }
                    }
                    assert!(
                        best >= 2.0 * r - 1e-12,
                        "spheres {i} and {j} overlap: distance {best} < {}",
                        2.0 * r
                    );
                }
            }
        }
    }

    #[test]
    fn single_random_sphere_matches_centered_volume() {
        let s = shape(31, 1.0);
        let centered = sphere_inclusion(s, 0.2).unwrap().volume_fractions()[1];
        let random = random_spheres(s, 1, 0.2, 9).unwrap().volume_fractions()[1];
        // Same continuum sphere up to translation; voxelization may differ
        // by a boundary shell.
        assert!(
            (random - centered).abs() < 0.02,
            "single random sphere vf {random} far from centered {centered}"
        );
    }

    #[test]
    fn over_packed_request_reports_jam() {
        // Demand many large spheres in a small cell: each is individually
        // legal (diameter < edge) but collectively they cannot fit.
        let s = shape(9, 1.0);
        match random_spheres(s, 40, 0.55, 3) {
            Err(CoreError::PackingJammed { placed, requested }) => {
                assert_eq!(requested, 40);
                assert!(placed < 40);
            }
            Err(CoreError::InvalidMicrostructure(_)) => {
                panic!("should jam, not fail validation")
            }
            other => panic!("expected jam, got {other:?}"),
        }
    }

    #[test]
    fn phase_map_validation() {
        let s = shape(3, 1.0);
        assert!(PhaseMap::new(s, 2, vec![0; 26]).is_err(), "short array");
        assert!(PhaseMap::new(s, 0, vec![0; 27]).is_err(), "zero phases");
        assert!(
            PhaseMap::new(s, 2, vec![2; 27]).is_err(),
            "id out of range"
        );
        let ok = PhaseMap::new(s, 3, vec![1; 27]).unwrap();
        let vf = ok.volume_fractions();
        assert_eq!(vf, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let dir = std::env::temp_dir().join("perihom-micro-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.dbfm");
        let s = GridShape {
            n: [5, 7, 3],
            l: [1.0, 2.5, 0.125],
        };
        let ids: Vec<u16> = (0..s.nvox()).map(|v| (v % 3) as u16).collect();
        let map = PhaseMap::new(s, 3, ids).unwrap();
        save_phase_map(&map, &path).unwrap();
        let back = load_phase_map(&path).unwrap();
        assert_eq!(map, back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn loader_rejects_malformed_files() {
        let dir = std::env::temp_dir().join("perihom-micro-malformed");
        std::fs::create_dir_all(&dir).unwrap();
        let s = shape(3, 1.0);
        let map = PhaseMap::new(s, 2, vec![0; 27]).unwrap();
        let good = dir.join("good.dbfm");
        save_phase_map(&map, &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();

        let write = |name: &str, data: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, data).unwrap();
            p
        };

        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            load_phase_map(write("magic.dbfm", &bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        // Unsupported version.
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            load_phase_map(write("version.dbfm", &bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        // Truncated payload (drop the last voxel).
        let bad = &bytes[..bytes.len() - 2];
        assert!(matches!(
            load_phase_map(write("short.dbfm", bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            load_phase_map(write("long.dbfm", &bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        // Phase id beyond the declared count: set one voxel id to 7.
        let mut bad = bytes.clone();
        let off = bad.len() - 2;
        bad[off] = 7;
        assert!(matches!(
            load_phase_map(write("overflow.dbfm", &bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        // Even grid size in the header.
        let mut bad = bytes.clone();
        bad[6] = 4; // n1 low byte: 3 -> 4
        assert!(matches!(
            load_phase_map(write("even.dbfm", &bad)),
            Err(CoreError::MalformedPhaseMap(_))
        ));

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn volume_fractions_match_recount() {
        let map = sphere_inclusion(shape(15, 2.0), 0.1).unwrap();
        let vf = map.volume_fractions();
        let count1 = map.ids().iter().filter(|&&id| id == 1).count();
        assert_eq!(vf[1], count1 as f64 / map.ids().len() as f64);
        assert!((vf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
