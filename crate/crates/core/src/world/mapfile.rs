//! Static occupancy maps: an 8-bit grayscale image (0 = occupied,
//! 255 = free) plus a JSON sidecar with resolution, origin and thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CostMap, MapError, Vec2, FREE, LETHAL};

const MAX_SIDE: u32 = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMetadata {
    /// Image path, relative to the sidecar.
    pub image: String,
    /// Meters per cell.
    pub resolution: f64,
    /// World position of the lower-left pixel corner; rotation must be zero.
    pub origin: [f64; 3],
    #[serde(default = "default_occupied")]
    pub occupied_thresh: f64,
    #[serde(default = "default_free")]
    pub free_thresh: f64,
    #[serde(default)]
    pub negate: bool,
}

fn default_occupied() -> f64 {
    0.65
}

fn default_free() -> f64 {
    0.196
}

impl MapMetadata {
    fn validate(&self) -> Result<(), MapError> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(MapError::File(format!("bad resolution {}", self.resolution)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(MapError::File("origin must be finite".into()));
        }
        if self.origin[2] != 0.0 {
            return Err(MapError::File("rotated map origins are not supported".into()));
        }
        let ok = |t: f64| (0.0..=1.0).contains(&t);
        if !ok(self.occupied_thresh) || !ok(self.free_thresh) || self.free_thresh > self.occupied_thresh {
            return Err(MapError::File("thresholds must satisfy 0 <= free <= occupied <= 1".into()));
        }
        Ok(())
    }
}

/// Builds a cost map from sidecar JSON text and encoded image bytes (PGM or PNG).
/// Unknown pixels (between the thresholds) are treated as lethal.
pub fn parse_map(meta_json: &str, image_bytes: &[u8]) -> Result<CostMap, MapError> {
    let meta: MapMetadata =
        serde_json::from_str(meta_json).map_err(|e| MapError::File(format!("metadata: {e}")))?;
    decode_with(&meta, image_bytes)
}

pub fn load_map_file(sidecar: &Path) -> Result<CostMap, MapError> {
    let text = std::fs::read_to_string(sidecar)
        .map_err(|e| MapError::File(format!("{}: {e}", sidecar.display())))?;
    let meta: MapMetadata =
        serde_json::from_str(&text).map_err(|e| MapError::File(format!("{}: {e}", sidecar.display())))?;
    let img_path = sidecar.parent().unwrap_or(Path::new(".")).join(&meta.image);
    let bytes = std::fs::read(&img_path)
        .map_err(|e| MapError::File(format!("{}: {e}", img_path.display())))?;
    decode_with(&meta, &bytes)
}

fn decode_with(meta: &MapMetadata, bytes: &[u8]) -> Result<CostMap, MapError> {
    meta.validate()?;
    let mut reader = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| MapError::File(e.to_string()))?;
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(256 << 20);
    reader.limits(limits);
    let img = reader
        .decode()
        .map_err(|e| MapError::File(format!("image: {e}")))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut map = CostMap::new(
        w as usize,
        h as usize,
        meta.resolution,
        Vec2::new(meta.origin[0], meta.origin[1]),
    )?;
    for (px, py, pixel) in img.enumerate_pixels() {
        let v = pixel.0[0] as f64;
        let occ = if meta.negate { v / 255.0 } else { (255.0 - v) / 255.0 };
        let c = if occ > meta.occupied_thresh {
            LETHAL
        } else if occ < meta.free_thresh {
            FREE
        } else {
            LETHAL
        };
        // Image row 0 is the top of the map.
        map.set_cell(px as usize, (h - 1 - py) as usize, c);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P5\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn decodes_pgm_with_row_flip() {
        // top row occupied, bottom row free
        let img = pgm(3, 2, &[0, 0, 0, 255, 255, 255]);
        let meta = r#"{"image":"m.pgm","resolution":0.5,"origin":[1.0,2.0,0.0]}"#;
        let m = parse_map(meta, &img).unwrap();
        assert_eq!((m.width(), m.height()), (3, 2));
        assert_eq!(m.cell(0, 0), FREE);
        assert_eq!(m.cell(2, 1), LETHAL);
        assert_eq!(m.cost_at(Vec2::new(1.2, 2.2)), FREE);
        assert_eq!(m.cost_at(Vec2::new(1.2, 2.7)), LETHAL);
    }

    #[test]
    fn unknown_pixels_are_lethal_and_negate_flips() {
        let img = pgm(2, 1, &[205, 255]);
        let meta = r#"{"image":"m.pgm","resolution":1.0,"origin":[0,0,0]}"#;
        let m = parse_map(meta, &img).unwrap();
        assert_eq!(m.cell(0, 0), LETHAL);
        assert_eq!(m.cell(1, 0), FREE);
        let neg = r#"{"image":"m.pgm","resolution":1.0,"origin":[0,0,0],"negate":true}"#;
        let m = parse_map(neg, &img).unwrap();
        assert_eq!(m.cell(1, 0), LETHAL);
    }

    #[test]
    fn rejects_bad_metadata() {
        let img = pgm(1, 1, &[255]);
        assert!(parse_map(r#"{"image":"m","resolution":0,"origin":[0,0,0]}"#, &img).is_err());
        assert!(parse_map(r#"{"image":"m","resolution":1,"origin":[0,0,0.3]}"#, &img).is_err());
        assert!(parse_map(r#"{"image":"m","resolution":1,"origin":[0,0,0],"extra":1}"#, &img).is_err());
        assert!(parse_map(r#"{"image":"m","resolution":1,"origin":[0,0,0]}"#, b"garbage").is_err());
    }
}
