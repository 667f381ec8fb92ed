//! Tile maps for the convolutional baseline.
//!
//! A net at `(x, y)` falls into tile `(⌊y / tile⌋, ⌊x / tile⌋)`. Input
//! channels hold per-tile sums of R, P, I_peak and I_avg (plus t_rise, t_fall
//! and τ for set B); the label map holds the mean drop of the labelled member
//! nets and the mask marks tiles that have a label. Both sides are padded
//! with zeros to a multiple of 16.
//!
//! Binary layout: `b"IRTG"`, a little-endian `u32` header length, the JSON
//! [`TileHeader`], then `f64` little-endian arrays `channels` (`C·H·W`),
//! `labels` (`H·W`) and `mask` (`H·W`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSetId};
use crate::error::{Error, Result};

pub const DEFAULT_TILE_UM: f64 = 1.5;
/// Spatial sizes are padded to a multiple of this (four 2× poolings).
pub const SIZE_MULTIPLE: usize = 16;
const MAGIC: &[u8; 4] = b"IRTG";

pub fn channel_names(set_id: FeatureSetId) -> &'static [&'static str] {
    const ALL: [&str; 7] = ["resistance_ohm", "p_total_w", "i_peak_a", "i_avg_a", "t_rise_s", "t_fall_s", "tau_s"];
    match set_id {
        FeatureSetId::SetA => &ALL[..4],
        FeatureSetId::SetB => &ALL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileHeader {
    pub format: String,
    pub version: u32,
    pub tile_um: f64,
    pub set_id: FeatureSetId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Extent before padding.
    pub occupied_height: usize,
    pub occupied_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_um: f64,
    pub set_id: FeatureSetId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub occupied_height: usize,
    pub occupied_width: usize,
    /// `[C, H, W]` row-major.
    pub features: Vec<f64>,
    /// `[H, W]`, mean drop in mV; 0 where unlabelled.
    pub labels: Vec<f64>,
    /// `[H, W]`, 1 where `labels` is defined.
    pub mask: Vec<f64>,
}

fn round_up(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE
}

fn record_channels(r: &crate::data::NetRecord) -> [f64; 7] {
    [r.resistance_ohm, r.p_total_w, r.i_peak_a, r.i_avg_a, r.t_rise_s, r.t_fall_s, r.tau_s]
}

impl TileGrid {
    /// Tile `(row, col)` containing a point.
    pub fn tile_of(&self, x_um: f64, y_um: f64) -> (usize, usize) {
        ((y_um / self.tile_um).floor() as usize, (x_um / self.tile_um).floor() as usize)
    }

    pub fn header(&self) -> TileHeader {
        TileHeader {
            format: "irdrop-tiles".to_string(),
            version: 1,
            tile_um: self.tile_um,
            set_id: self.set_id,
            channels: self.channels,
            height: self.height,
            width: self.width,
            occupied_height: self.occupied_height,
            occupied_width: self.occupied_width,
        }
    }

    /// Replace the label map with means over the nets in `idx` only.
    pub fn relabel(&mut self, ds: &Dataset, idx: &[usize]) -> Result<()> {
        let hw = self.height * self.width;
        let mut sum = vec![0.0; hw];
        let mut count = vec![0usize; hw];
        for &i in idx {
            let r = ds
                .records()
                .get(i)
                .ok_or_else(|| Error::validation(format!("net index {i} out of range")))?;
            let Some(y) = r.ir_drop_mv else {
                return Err(Error::validation(format!("net {} has no label", r.net_id)));
            };
            let (tr, tc) = self.tile_of(r.x_um, r.y_um);
            sum[tr * self.width + tc] += y;
            count[tr * self.width + tc] += 1;
        }
        for k in 0..hw {
            if count[k] > 0 {
                self.labels[k] = sum[k] / count[k] as f64;
                self.mask[k] = 1.0;
            } else {
                self.labels[k] = 0.0;
                self.mask[k] = 0.0;
            }
        }
        Ok(())
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.features.iter().chain(&self.labels).chain(&self.mask) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::validation("not a tile grid file"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: TileHeader = serde_json::from_slice(&header)?;
        if h.channels != channel_names(h.set_id).len() || !h.height.is_multiple_of(SIZE_MULTIPLE) || !h.width.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::validation("inconsistent tile grid header"));
        }
        let hw = h.height * h.width;
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let features = read_vec(h.channels * hw)?;
        let labels = read_vec(hw)?;
        let mask = read_vec(hw)?;
        Ok(TileGrid {
            tile_um: h.tile_um,
            set_id: h.set_id,
            channels: h.channels,
            height: h.height,
            width: h.width,
            occupied_height: h.occupied_height,
            occupied_width: h.occupied_width,
            features,
            labels,
            mask,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TileGrid::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Rasterize every net's features; labels come from every labelled net.
pub fn rasterize(ds: &Dataset, tile_um: f64, set_id: FeatureSetId) -> Result<TileGrid> {
    if !(tile_um > 0.0 && tile_um.is_finite()) {
        return Err(Error::validation(format!("tile size must be positive, got {tile_um}")));
    }
    if let Some(r) = ds.records().iter().find(|r| !(r.x_um >= 0.0 && r.y_um >= 0.0)) {
        return Err(Error::validation(format!("net {} has a negative coordinate", r.net_id)));
    }
    let tiles = |v: f64| (v / tile_um).floor() as usize + 1;
    let occ_h = ds.records().iter().map(|r| tiles(r.y_um)).max().unwrap_or(0);
    let occ_w = ds.records().iter().map(|r| tiles(r.x_um)).max().unwrap_or(0);
    let (height, width) = (round_up(occ_h), round_up(occ_w));
    let c = channel_names(set_id).len();
    let hw = height * width;
    let mut grid = TileGrid {
        tile_um,
        set_id,
        channels: c,
        height,
        width,
        occupied_height: occ_h,
        occupied_width: occ_w,
        features: vec![0.0; c * hw],
        labels: vec![0.0; hw],
        mask: vec![0.0; hw],
    };
    for r in ds.records() {
        let (tr, tc) = grid.tile_of(r.x_um, r.y_um);
        for (ch, v) in record_channels(r).iter().take(c).enumerate() {
            grid.features[ch * hw + tr * width + tc] += v;
        }
    }
    let labelled: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].ir_drop_mv.is_some()).collect();
    grid.relabel(ds, &labelled)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NetRecord;

    fn rec(id: u64, x: f64, y: f64, label: Option<f64>) -> NetRecord {
        NetRecord {
            net_id: id,
            x_um: x,
            y_um: y,
            resistance_ohm: 1.0 + id as f64,
            p_total_w: 1e-3,
            i_peak_a: 2e-3,
            i_avg_a: 1e-3,
            t_rise_s: 1e-11,
            t_fall_s: 2e-11,
            tau_s: 3e-11,
            ir_drop_mv: label,
        }
    }

    #[test]
    fn floor_rule() {
        let ds = Dataset::new(vec![rec(0, 0.9, 0.9, Some(1.0))], 800.0, "t").unwrap();
        let g = rasterize(&ds, 1.5, FeatureSetId::SetA).unwrap();
        assert_eq!(g.tile_of(0.9, 0.9), (0, 0));
        assert_eq!((g.height, g.width), (16, 16));
        assert_eq!(g.mask[0], 1.0);
        assert_eq!(g.tile_of(3.1, 1.6), (1, 2));
    }

    #[test]
    fn mean_label() {
        let ds = Dataset::new(vec![rec(0, 0.1, 0.1, Some(10.0)), rec(1, 1.0, 1.4, Some(20.0))], 800.0, "t").unwrap();
        let g = rasterize(&ds, 1.5, FeatureSetId::SetB).unwrap();
        assert_eq!(g.labels[0], 15.0);
        assert_eq!(g.channels, 7);
        assert_eq!(g.features[0], 1.0 + 2.0);
    }

    #[test]
    fn empty_dataset() {
        let ds = Dataset::new(vec![], 800.0, "t").unwrap();
        let g = rasterize(&ds, 1.5, FeatureSetId::SetA).unwrap();
        assert!(g.features.iter().all(|&v| v == 0.0));
        assert!(g.mask.iter().all(|&v| v == 0.0));
        assert_eq!((g.height, g.width), (16, 16));
    }

    #[test]
    fn padding_to_multiple_of_sixteen() {
        let ds = Dataset::new(vec![rec(0, 40.0, 10.0, None)], 800.0, "t").unwrap();
        let g = rasterize(&ds, 1.5, FeatureSetId::SetA).unwrap();
        assert_eq!((g.occupied_height, g.occupied_width), (7, 27));
        assert_eq!((g.height, g.width), (16, 32));
        assert!(g.mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_coordinate_rejected() {
        let ds = Dataset::new(vec![rec(0, -1.0, 0.0, None)], 800.0, "t").unwrap();
        assert!(rasterize(&ds, 1.5, FeatureSetId::SetA).is_err());
    }

    #[test]
    fn relabel_uses_subset() {
        let ds = Dataset::new(vec![rec(0, 0.1, 0.1, Some(10.0)), rec(1, 1.0, 1.4, Some(20.0))], 800.0, "t").unwrap();
        let mut g = rasterize(&ds, 1.5, FeatureSetId::SetA).unwrap();
        g.relabel(&ds, &[1]).unwrap();
        assert_eq!(g.labels[0], 20.0);
    }

    #[test]
    fn binary_round_trip() {
        let ds = Dataset::new(vec![rec(0, 3.0, 7.0, Some(4.5)), rec(1, 20.0, 2.0, Some(1.25))], 800.0, "t").unwrap();
        let g = rasterize(&ds, 1.5, FeatureSetId::SetB).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        assert_eq!(TileGrid::read(buf.as_slice()).unwrap(), g);
        assert!(TileGrid::read(&b"nope"[..]).is_err());
    }
}
