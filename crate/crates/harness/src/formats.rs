//! On-disk formats: BEVM map tiles, LPC1 point clouds, LPW1 weight
//! checkpoints and JSON scenario manifests.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use groundloc_core::embed::WeightBundle;
use groundloc_core::learn::DeskGeometry;
use groundloc_core::matcher::{Fusion, LearnedNets};
use groundloc_core::raster::DEFAULT_HEIGHT_RANGE;
use groundloc_core::world::{Actor, ActorKind, ActorSet, IntensityMap, Scenario};
use groundloc_core::{BevGrid, Grid, GridSpec, LidarPoint, Point2, Pose2, Raster, Trajectory};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

const BEVM_MAGIC: &[u8; 4] = b"BEVM";
const BEVM_VERSION: u32 = 1;
const LPC1_MAGIC: &[u8; 4] = b"LPC1";

fn format_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// The f64 whose shortest decimal form matches the stored f32, so that a
/// 0.05 m resolution reads back as exactly 0.05.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

/// Encodes an unrotated grid. The origin is the outer corner of cell (0, 0).
pub fn encode_bevm(grid: &BevGrid) -> std::result::Result<Vec<u8>, String> {
    let spec = &grid.spec;
    let c = spec.center();
    if c.yaw != 0.0 {
        return Err("BEVM tiles must be axis-aligned".into());
    }
    let res = spec.resolution();
    let (rows, cols) = (spec.rows(), spec.cols());
    let origin = [c.x - cols as f64 * res / 2.0, c.y - rows as f64 * res / 2.0];
    let mut b = Vec::with_capacity(40 + 4 * grid.raster.data().len());
    b.extend_from_slice(BEVM_MAGIC);
    for v in [BEVM_VERSION, rows as u32, cols as u32, grid.channels() as u32] {
        b.write_u32::<LE>(v).expect("vec write");
    }
    b.write_f32::<LE>(res as f32).expect("vec write");
    b.write_f64::<LE>(origin[0]).expect("vec write");
    b.write_f64::<LE>(origin[1]).expect("vec write");
    for &v in grid.raster.data() {
        b.write_f32::<LE>(v).expect("vec write");
    }
    Ok(b)
}

pub fn decode_bevm(bytes: &[u8]) -> std::result::Result<BevGrid, String> {
    let mut r = Cursor::new(bytes);
    let short = |_| "truncated header".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != BEVM_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.read_u32::<LE>().map_err(short)?;
    if version != BEVM_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rows = r.read_u32::<LE>().map_err(short)? as usize;
    let cols = r.read_u32::<LE>().map_err(short)? as usize;
    let channels = r.read_u32::<LE>().map_err(short)? as usize;
    let res = widen(r.read_f32::<LE>().map_err(short)?);
    let ox = r.read_f64::<LE>().map_err(short)?;
    let oy = r.read_f64::<LE>().map_err(short)?;
    if rows == 0 || cols == 0 || channels == 0 {
        return Err(format!("empty tile {rows}x{cols}x{channels}"));
    }
    if !(ox.is_finite() && oy.is_finite()) {
        return Err("non-finite origin".into());
    }
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(channels))
        .ok_or("tile dimensions overflow")?;
    let payload = &bytes[r.position() as usize..];
    if payload.len() != 4 * n {
        return Err(format!("payload holds {} bytes, expected {}", payload.len(), 4 * n));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let slices = if channels == 1 { 0 } else { channels - 1 };
    let center = Pose2::new(ox + cols as f64 * res / 2.0, oy + rows as f64 * res / 2.0, 0.0);
    let spec = GridSpec::from_cells(res, cols, rows, slices, DEFAULT_HEIGHT_RANGE, center)
        .map_err(|e| e.to_string())?;
    let raster = Raster::from_vec(channels, rows, cols, data).map_err(|e| e.to_string())?;
    Grid::new(spec, raster).map_err(|e| e.to_string())
}

pub fn write_bevm(path: &Path, grid: &BevGrid) -> Result<()> {
    let bytes = encode_bevm(grid).map_err(|m| format_err(path, m))?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bevm(path: &Path) -> Result<BevGrid> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_bevm(&bytes).map_err(|m| format_err(path, m))
}

pub fn read_map(path: &Path) -> Result<IntensityMap> {
    Ok(IntensityMap::from_grid(read_bevm(path)?)?)
}

pub fn encode_lpc1(points: &[LidarPoint]) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + 16 * points.len());
    b.extend_from_slice(LPC1_MAGIC);
    b.write_u32::<LE>(points.len() as u32).expect("vec write");
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            b.write_f32::<LE>(v).expect("vec write");
        }
    }
    b
}

pub fn decode_lpc1(bytes: &[u8]) -> std::result::Result<Vec<LidarPoint>, String> {
    if bytes.len() < 8 || &bytes[..4] != LPC1_MAGIC {
        return Err("bad magic".into());
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != 16 * count {
        return Err(format!("{} point bytes for {count} points", body.len()));
    }
    let f = |c: &[u8], k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]);
    Ok(body
        .chunks_exact(16)
        .map(|c| LidarPoint {
            x: f(c, 0),
            y: f(c, 1),
            z: f(c, 2),
            intensity: f(c, 3),
        })
        .collect())
}

pub fn write_points(path: &Path, points: &[LidarPoint]) -> Result<()> {
    fs::write(path, encode_lpc1(points)).map_err(io_err(path))
}

pub fn read_points(path: &Path) -> Result<Vec<LidarPoint>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_lpc1(&bytes).map_err(|m| format_err(path, m))
}

pub fn write_weights(path: &Path, bundle: &WeightBundle) -> Result<()> {
    fs::write(path, bundle.to_bytes()).map_err(io_err(path))
}

pub fn read_weights(path: &Path) -> Result<WeightBundle> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    WeightBundle::from_bytes(&bytes).map_err(|e| format_err(path, e.to_string()))
}

/// Stack tags used in checkpoints.
pub const TAG_ONLINE: &str = "online";
pub const TAG_MAP: &str = "map";
pub const TAG_BASE: &str = "base";

pub fn nets_to_bundle(nets: &LearnedNets) -> WeightBundle {
    let mut stacks = vec![
        (TAG_ONLINE.to_string(), nets.online.clone()),
        (TAG_MAP.to_string(), nets.map.clone()),
    ];
    if let Some(f) = &nets.fusion {
        stacks.push((TAG_BASE.to_string(), f.base.clone()));
    }
    WeightBundle {
        stacks,
        fusion: nets.fusion.as_ref().map(|f| f.params.clone()),
    }
}

/// Rebuilds localizer nets; a fused checkpoint uses the desk coarse grid.
pub fn bundle_to_nets(bundle: &WeightBundle, geometry: &DeskGeometry) -> std::result::Result<LearnedNets, String> {
    let get = |tag: &str| bundle.stack(tag).cloned().ok_or(format!("checkpoint lacks the {tag:?} stack"));
    let fusion = match (&bundle.fusion, bundle.stack(TAG_BASE)) {
        (None, None) => None,
        (Some(params), Some(base)) => Some(Fusion {
            base: base.clone(),
            params: params.clone(),
            coarse_spec: geometry.coarse_spec().map_err(|e| e.to_string())?,
        }),
        _ => return Err("fusion parameters and base stack must come together".into()),
    };
    Ok(LearnedNets {
        online: get(TAG_ONLINE)?,
        map: get(TAG_MAP)?,
        fusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKindTag {
    Parked,
    Oncoming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorRecord {
    pub kind: ActorKindTag,
    pub length: f64,
    pub width: f64,
    pub gt: Trajectory,
    pub forecasts: Vec<Trajectory>,
}

/// Self-describing scenario document; `map` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub format: String,
    pub seed: u64,
    pub map: String,
    pub map_digest: String,
    pub forecast_samples: usize,
    pub sdv_gt: Trajectory,
    pub route: Vec<Point2>,
    pub actors: Vec<ActorRecord>,
}

pub const MANIFEST_FORMAT: &str = "groundloc-scenario-1";

impl ScenarioManifest {
    pub fn from_scenario(sc: &Scenario, map_file: &str) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            seed: sc.seed,
            map: map_file.into(),
            map_digest: sc.map.digest(),
            forecast_samples: sc.actors.samples,
            sdv_gt: sc.sdv_gt.clone(),
            route: sc.route.clone(),
            actors: sc
                .actors
                .actors
                .iter()
                .map(|a| ActorRecord {
                    kind: match a.kind {
                        ActorKind::Parked => ActorKindTag::Parked,
                        ActorKind::Oncoming => ActorKindTag::Oncoming,
                    },
                    length: a.length,
                    width: a.width,
                    gt: a.gt.clone(),
                    forecasts: a.forecasts.clone(),
                })
                .collect(),
        }
    }

    pub fn into_scenario(self, map: IntensityMap) -> Scenario {
        Scenario {
            map,
            sdv_gt: self.sdv_gt,
            route: self.route,
            actors: ActorSet {
                actors: self
                    .actors
                    .into_iter()
                    .map(|a| Actor {
                        kind: match a.kind {
                            ActorKindTag::Parked => ActorKind::Parked,
                            ActorKindTag::Oncoming => ActorKind::Oncoming,
                        },
                        length: a.length,
                        width: a.width,
                        gt: a.gt,
                        forecasts: a.forecasts,
                    })
                    .collect(),
                samples: self.forecast_samples,
            },
            seed: self.seed,
        }
    }
}

/// Writes `scenario_NNNN.json` and `map_NNNN.bevm` into `dir`.
pub fn write_scenario(dir: &Path, index: usize, sc: &Scenario) -> Result<PathBuf> {
    let map_file = format!("map_{index:04}.bevm");
    write_bevm(&dir.join(&map_file), &sc.map.grid)?;
    let manifest = ScenarioManifest::from_scenario(sc, &map_file);
    let path = dir.join(format!("scenario_{index:04}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| HarnessError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: ScenarioManifest = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(format_err(path, format!("unknown format {:?}", manifest.format)));
    }
    let map_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.map);
    let map = read_map(&map_path)?;
    if map.digest() != manifest.map_digest {
        return Err(format_err(&map_path, "map digest does not match the manifest"));
    }
    Ok(manifest.into_scenario(map))
}

/// Every `scenario_*.json` in `dir`, in file-name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scenario_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format_err(dir, "no scenario manifests"));
    }
    paths.iter().map(|p| read_scenario(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use groundloc_core::world::gen_map;

    #[test]
    fn bevm_header_layout() {
        let map = gen_map(1, 3.0, 2.0).unwrap();
        let b = encode_bevm(&map.grid).unwrap();
        assert_eq!(&b[..4], b"BEVM");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 40);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 60);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 0.05);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 0.0);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), 0.0);
        assert_eq!(b.len(), 40 + 4 * 40 * 60);
    }

    #[test]
    fn bevm_round_trip_is_exact() {
        let map = gen_map(2, 4.0, 3.0).unwrap();
        let back = decode_bevm(&encode_bevm(&map.grid).unwrap()).unwrap();
        assert_eq!(back, map.grid);
    }

    #[test]
    fn bevm_rejects_corruption() {
        let map = gen_map(3, 1.0, 1.0).unwrap();
        let b = encode_bevm(&map.grid).unwrap();
        assert!(decode_bevm(&b[..b.len() - 1]).is_err());
        assert!(decode_bevm(&b[..10]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_bevm(&bad).is_err());
        let mut bad = b;
        bad[4] = 2;
        assert!(decode_bevm(&bad).is_err());
    }

    #[test]
    fn lpc1_round_trip() {
        let pts = vec![
            LidarPoint { x: 1.5, y: -2.0, z: 0.1, intensity: 0.7 },
            LidarPoint { x: 0.0, y: 3.25, z: 0.0, intensity: 0.0 },
        ];
        let b = encode_lpc1(&pts);
        assert_eq!(b.len(), 8 + 32);
        assert_eq!(decode_lpc1(&b).unwrap(), pts);
        assert!(decode_lpc1(&b[..20]).is_err());
    }
}
