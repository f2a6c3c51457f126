//! Electrode positions of the idealized spherical 10-10 system.
//!
//! Coordinates are on the unit sphere with +x towards the right ear, +y
//! towards the nasion and +z through the vertex (Cz). Midline and outer-ring
//! electrodes sit at exact 10 % arc steps (18 degrees); in-between positions
//! of a row are placed at equal fractions along the great circle from the
//! row's midline electrode to its outer-ring electrode.

use std::collections::HashMap;
use std::f64::consts::PI;

/// Case-insensitive matching key for an electrode label. Trailing dots
/// (PhysioNet style) are stripped and the old temporal names map to their
/// 10-10 equivalents (T3→T7, T4→T8, T5→P7, T6→P8).
pub fn canonical_label(label: &str) -> String {
    let key = label.trim().trim_end_matches('.').to_ascii_uppercase();
    match key.as_str() {
        "T3" => "T7".into(),
        "T4" => "T8".into(),
        "T5" => "P7".into(),
        "T6" => "P8".into(),
        _ => key,
    }
}

#[derive(Debug, Clone)]
pub struct MontageTable {
    positions: HashMap<String, [f64; 3]>,
}

// Row name, sagittal fraction of the nasion–inion arc for the midline electrode,
// azimuth (degrees from the front) of the row's outer-ring electrode.
const ROWS: [(&str, f64, f64); 9] = [
    ("FP", 0.1, 18.0),
    ("AF", 0.2, 36.0),
    ("F", 0.3, 54.0),
    ("FC", 0.4, 72.0),
    ("C", 0.5, 90.0),
    ("CP", 0.6, 108.0),
    ("P", 0.7, 126.0),
    ("PO", 0.8, 144.0),
    ("O", 0.9, 162.0),
];

impl MontageTable {
    pub fn standard() -> Self {
        let mut positions = HashMap::new();
        let ring_h = (0.1 * PI).sin();
        let ring_r = (0.1 * PI).cos();
        let ring = |az_deg: f64, right: bool| {
            let az = az_deg.to_radians();
            let x = ring_r * az.sin();
            [if right { x } else { -x }, ring_r * az.cos(), ring_h]
        };
        let equator = |az_deg: f64, right: bool| {
            let az = az_deg.to_radians();
            [if right { az.sin() } else { -az.sin() }, az.cos(), 0.0]
        };

        positions.insert("NZ".to_string(), [0.0, 1.0, 0.0]);
        positions.insert("IZ".to_string(), [0.0, -1.0, 0.0]);
        positions.insert("T9".to_string(), [-1.0, 0.0, 0.0]);
        positions.insert("T10".to_string(), [1.0, 0.0, 0.0]);

        for &(row, frac, ring_az) in &ROWS {
            let a = frac * PI;
            let mid = [0.0, a.cos(), a.sin()];
            positions.insert(format!("{row}Z"), mid);

            let (left_outer, right_outer) = (ring(ring_az, false), ring(ring_az, true));
            // Outer-ring columns: Fp1/2 and O1/2 are the ring electrodes of their rows,
            // every other row uses columns 7/8.
            let (lo, ro) = match row {
                "FP" | "O" => ("1", "2"),
                _ => ("7", "8"),
            };
            positions.insert(format!("{row}{lo}"), left_outer);
            positions.insert(format!("{row}{ro}"), right_outer);

            if !matches!(row, "FP" | "O") {
                for (step, (l, r)) in [(1, ("1", "2")), (2, ("3", "4")), (3, ("5", "6"))] {
                    let t = step as f64 / 4.0;
                    positions.insert(format!("{row}{l}"), slerp(&mid, &left_outer, t));
                    positions.insert(format!("{row}{r}"), slerp(&mid, &right_outer, t));
                }
                if ring_az != 90.0 {
                    positions.insert(format!("{row}9"), equator(ring_az, false));
                    positions.insert(format!("{row}10"), equator(ring_az, true));
                }
            }
        }
        // The C row's outer electrodes are named T7/T8 rather than C7/C8.
        for (from, to) in [("C7", "T7"), ("C8", "T8"), ("FC7", "FT7"), ("FC8", "FT8")] {
            let p = positions.remove(from).expect("constructed above");
            positions.insert(to.to_string(), p);
        }
        for (from, to) in [("CP7", "TP7"), ("CP8", "TP8"), ("FC9", "FT9"), ("FC10", "FT10")] {
            let p = positions.remove(from).expect("constructed above");
            positions.insert(to.to_string(), p);
        }
        for (from, to) in [("CP9", "TP9"), ("CP10", "TP10")] {
            let p = positions.remove(from).expect("constructed above");
            positions.insert(to.to_string(), p);
        }
        MontageTable { positions }
    }

    pub fn position(&self, label: &str) -> Option<[f64; 3]> {
        self.positions.get(&canonical_label(label)).copied()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.position(label).is_some()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.positions.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn slerp(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let omega = dot.clamp(-1.0, 1.0).acos();
    if omega.abs() < 1e-12 {
        return *a;
    }
    let sa = ((1.0 - t) * omega).sin() / omega.sin();
    let sb = (t * omega).sin() / omega.sin();
    [
        sa * a[0] + sb * b[0],
        sa * a[1] + sb * b[1],
        sa * a[2] + sb * b[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BCI_IV_2A_CHANNELS, MMI_CHANNELS, PRETRAIN_CHANNELS};

    #[test]
    fn unit_norm_everywhere() {
        let m = MontageTable::standard();
        for label in m.labels() {
            let p = m.position(label).unwrap();
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((0.99..=1.01).contains(&n), "{label} has norm {n}");
        }
    }

    #[test]
    fn covers_every_montage_used() {
        let m = MontageTable::standard();
        for l in PRETRAIN_CHANNELS.iter().chain(&BCI_IV_2A_CHANNELS).chain(&MMI_CHANNELS) {
            assert!(m.contains(l), "missing {l}");
        }
    }

    #[test]
    fn landmark_geometry() {
        let m = MontageTable::standard();
        let cz = m.position("Cz").unwrap();
        assert!((cz[2] - 1.0).abs() < 1e-12);
        let c3 = m.position("C3").unwrap();
        // C3 is 36 degrees from the vertex towards the left ear.
        assert!((c3[0] + 36f64.to_radians().sin()).abs() < 1e-12);
        let t3 = m.position("T3").unwrap();
        assert_eq!(t3, m.position("t7.").unwrap());
        // Left hemisphere electrodes have negative x.
        assert!(m.position("F3").unwrap()[0] < 0.0);
        assert!(m.position("P4").unwrap()[0] > 0.0);
    }
}
