//! Binary snapshots and CSV histories.
//!
//! Snapshot layout, all little-endian:
//!
//! ```text
//! 0   8  magic  b"TMFSNAP\0"
//! 8   2  version (u16, currently 1)
//! 10  2  flags (u16, bit 0 = cylinder domain)
//! 12  4  reserved (zero)
//! 16  8  nx (u64)
//! 24  8  ny (u64)
//! 32  8  n, target dimension; each node has n + 1 components (u64)
//! 40  8  a (f64)  torus: Re tau      cylinder: ell
//! 48  8  b (f64)  torus: Im tau      cylinder: half-length of the grid window
//! 56  8  time (f64)
//! 64  .. nx * ny * (n + 1) f64 values, row-major, components innermost
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::field::SphereMapField;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"TMFSNAP\0";
pub const SNAPSHOT_VERSION: u16 = 1;
const FLAG_CYLINDER: u16 = 1;
const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub cylinder: bool,
    pub a: f64,
    pub b: f64,
    pub time: f64,
    pub field: SphereMapField,
}

impl Snapshot {
    pub fn encode(&self) -> Vec<u8> {
        let f = &self.field;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * f.data.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(if self.cylinder { FLAG_CYLINDER } else { 0 }).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in [f.nx as u64, f.ny as u64, f.target_dim() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.a, self.b, self.time] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(FlowError::Format(format!("snapshot too short ({} bytes)", bytes.len())));
        }
        if &bytes[0..8] != SNAPSHOT_MAGIC {
            return Err(FlowError::Format("bad snapshot magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != SNAPSHOT_VERSION {
            return Err(FlowError::Format(format!("unsupported snapshot version {version}")));
        }
        let flags = u16::from_le_bytes([bytes[10], bytes[11]]);
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let (nx, ny, n) = (u64_at(16) as usize, u64_at(24) as usize, u64_at(32) as usize);
        let count = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(n + 1))
            .ok_or_else(|| FlowError::Format("snapshot dimensions overflow".into()))?;
        if bytes.len() != HEADER_LEN + 8 * count {
            return Err(FlowError::Format(format!(
                "snapshot payload is {} bytes, expected {} for {nx}x{ny} nodes in S^{n}",
                bytes.len() - HEADER_LEN,
                8 * count
            )));
        }
        let data = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let field = SphereMapField::from_raw(nx, ny, n + 1, data).map_err(|e| FlowError::Format(e.to_string()))?;
        Ok(Self { cylinder: flags & FLAG_CYLINDER != 0, a: f64_at(40), b: f64_at(48), time: f64_at(56), field })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// One row of a flow history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySample {
    pub t: f64,
    pub energy: f64,
    pub tension_l2: f64,
    pub projection_l2: f64,
    pub a: f64,
    pub b: f64,
    pub inj: f64,
    pub speed_l2: f64,
}

pub const HISTORY_HEADER: &str = "t,E,tension_l2,projection_l2,a,b,inj,speed_l2";

/// Floats are written in shortest round-trip form so that reading back is exact.
pub fn history_csv(samples: &[HistorySample]) -> String {
    let mut out = String::with_capacity(64 * (samples.len() + 1));
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.t, s.energy, s.tension_l2, s.projection_l2, s.a, s.b, s.inj, s.speed_l2
        );
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistorySample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| FlowError::Format(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.join(",") != HISTORY_HEADER {
        return Err(FlowError::Format(format!("history header {:?} != {HISTORY_HEADER:?}", header.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FlowError::Format(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| FlowError::Format(format!("history row {}: {e}", line + 2)))?;
        if v.len() != 8 {
            return Err(FlowError::Format(format!("history row {} has {} fields", line + 2, v.len())));
        }
        out.push(HistorySample {
            t: v[0],
            energy: v[1],
            tension_l2: v[2],
            projection_l2: v[3],
            a: v[4],
            b: v[5],
            inj: v[6],
            speed_l2: v[7],
        });
    }
    Ok(out)
}
