//! Dataset container and its on-disk format.
//!
//! A dataset file is a single container:
//!
//! ```text
//! SKINMAP-DATASET\n
//! version 1\n
//! index <n>\n
//! <n bytes of line-delimited JSON: one header line, then one line per record>
//! <payload: concatenated PNG blobs, offsets relative to payload start>
//! ```
//!
//! The header line is `{"records":R,"payload_bytes":P}`. Each record line
//! carries the image metadata, anchors, labels, the blob offset/length and
//! the SHA-256 of the blob. Pixels are stored losslessly, so crops are
//! bit-exact across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::types::*;
use crate::anchors::crop_patch;
use crate::error::{Error, Result};

const MAGIC: &str = "SKINMAP-DATASET";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One facial image with its anchors and per-anchor measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: FacialImage,
    pub anchors: AnchorSet,
    pub labels: BTreeMap<PositionId, Vec<Measurement>>,
}

impl Record {
    /// Every labeled anchor must exist and have a croppable patch.
    pub fn new(
        image: FacialImage,
        anchors: AnchorSet,
        labels: BTreeMap<PositionId, Vec<Measurement>>,
    ) -> Result<Self> {
        let r = image.modality.patch_radius();
        for (&id, ms) in &labels {
            let c = anchors
                .get(id)
                .ok_or_else(|| Error::invalid(format!("label for {id} has no anchor")))?;
            let mut kinds = BTreeSet::new();
            if !ms.iter().all(|m| kinds.insert(m.kind)) {
                return Err(Error::invalid(format!("duplicate measurement kind at {id}")));
            }
            crate::anchors::patch_window(id, c, r, image.width(), image.height())?;
        }
        Ok(Self {
            image,
            anchors,
            labels,
        })
    }

    pub fn label(&self, id: PositionId, kind: MeasureKind) -> Option<Measurement> {
        self.labels
            .get(&id)
            .and_then(|ms| ms.iter().find(|m| m.kind == kind).copied())
    }

    /// Crops every anchor labeled with `kind`.
    pub fn patches(&self, kind: MeasureKind) -> Result<Vec<SkinPatch>> {
        let r = self.image.modality.patch_radius();
        let mut out = Vec::new();
        for &id in self.labels.keys() {
            let Some(label) = self.label(id, kind) else {
                continue;
            };
            let c = self.anchors.get(id).expect("checked at construction");
            let pixels = crop_patch(&self.image.pixels, id, c, r)?;
            out.push(SkinPatch {
                pixels,
                position: id,
                label,
                panelist_id: self.image.panelist_id.clone(),
                lighting: self.image.lighting,
                angle: self.image.angle,
                modality: self.image.modality,
            });
        }
        Ok(out)
    }
}

/// The dataset: a list of records, cheap to clone and filter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Arc<Record>>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Self {
        Self {
            records: records.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn records(&self) -> &[Arc<Record>] {
        &self.records
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(Arc::new(record));
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter(&self, pred: impl Fn(&Record) -> bool) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    pub fn panelists(&self) -> BTreeSet<String> {
        self.records
            .iter()
            .map(|r| r.image.panelist_id.clone())
            .collect()
    }

    pub fn lightings(&self) -> BTreeSet<Lighting> {
        self.records.iter().map(|r| r.image.lighting).collect()
    }

    pub fn angles(&self) -> BTreeSet<Angle> {
        self.records.iter().map(|r| r.image.angle).collect()
    }

    /// Patch-level sample count for one measurement kind.
    pub fn num_patches(&self, kind: MeasureKind) -> usize {
        self.records
            .iter()
            .map(|r| r.labels.values().filter(|ms| ms.iter().any(|m| m.kind == kind)).count())
            .sum()
    }

    pub fn patches(&self, kind: MeasureKind) -> Result<Vec<SkinPatch>> {
        let mut out = Vec::with_capacity(self.num_patches(kind));
        for r in &self.records {
            out.extend(r.patches(kind)?);
        }
        Ok(out)
    }

    /// Splits by panelist: ids in `test_ids` go to the second dataset.
    pub fn split_by_panelist(&self, test_ids: &BTreeSet<String>) -> (Dataset, Dataset) {
        let test = self.filter(|r| test_ids.contains(&r.image.panelist_id));
        let train = self.filter(|r| !test_ids.contains(&r.image.panelist_id));
        (train, test)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut lines = Vec::with_capacity(self.records.len() + 1);
        let mut metas = Vec::with_capacity(self.records.len());
        for (i, rec) in self.records.iter().enumerate() {
            let blob = encode_png(&rec.image.pixels)?;
            let meta = RecordMeta {
                record: i,
                panelist: rec.image.panelist_id.clone(),
                modality: rec.image.modality,
                lighting: rec.image.lighting,
                angle: rec.image.angle,
                width: rec.image.width(),
                height: rec.image.height(),
                anchors: rec
                    .anchors
                    .iter()
                    .map(|(id, c)| AnchorEntry {
                        id,
                        row: c.row,
                        col: c.col,
                    })
                    .collect(),
                labels: rec
                    .labels
                    .iter()
                    .flat_map(|(&id, ms)| {
                        ms.iter().map(move |m| LabelEntry {
                            id,
                            kind: m.kind,
                            value: m.value,
                        })
                    })
                    .collect(),
                blob_offset: payload.len() as u64,
                blob_len: blob.len() as u64,
                sha256: hex::encode(Sha256::digest(&blob)),
            };
            payload.extend_from_slice(&blob);
            metas.push(meta);
        }
        let header = IndexHeader {
            records: self.records.len(),
            payload_bytes: payload.len() as u64,
        };
        lines.push(serde_json::to_string(&header).expect("header serializes"));
        for m in &metas {
            lines.push(serde_json::to_string(m).expect("record meta serializes"));
        }
        let mut index = lines.join("\n");
        index.push('\n');

        let mut out = Vec::with_capacity(index.len() + payload.len() + 64);
        write!(
            out,
            "{MAGIC}\nversion {DATASET_FORMAT_VERSION}\nindex {}\n",
            index.len()
        )
        .expect("write to vec");
        out.extend_from_slice(index.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let magic = next_line(bytes, &mut cursor, "magic")?;
        if magic != MAGIC {
            return Err(Error::parse("header", format!("bad magic {magic:?}")));
        }
        let version = next_line(bytes, &mut cursor, "version")?;
        let version: u32 = version
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("header", format!("bad version line {version:?}")))?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::parse(
                "header",
                format!("unsupported dataset version {version}"),
            ));
        }
        let index_line = next_line(bytes, &mut cursor, "index length")?;
        let index_len: usize = index_line
            .strip_prefix("index ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("header", format!("bad index line {index_line:?}")))?;
        let index = bytes
            .get(cursor..cursor + index_len)
            .ok_or_else(|| Error::parse("index", "file truncated inside the index"))?;
        let index = std::str::from_utf8(index).map_err(|e| Error::parse("index", e))?;
        let payload = &bytes[cursor + index_len..];

        let mut lines = index.lines();
        let header: IndexHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::parse("index", "missing header line"))?,
        )
        .map_err(|e| Error::parse("index header", e))?;
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::parse(
                "payload",
                format!(
                    "expected {} payload bytes, found {}",
                    header.payload_bytes,
                    payload.len()
                ),
            ));
        }

        let mut records = Vec::with_capacity(header.records);
        for (i, line) in lines.enumerate() {
            let ctx = format!("record {i}");
            let meta: RecordMeta = serde_json::from_str(line).map_err(|e| Error::parse(&ctx, e))?;
            if meta.record != i {
                return Err(Error::parse(&ctx, format!("index says record {}", meta.record)));
            }
            records.push(meta.into_record(payload).map_err(|e| match e {
                Error::Parse { message, .. } => Error::parse(&ctx, message),
                other => Error::parse(&ctx, other),
            })?);
        }
        if records.len() != header.records {
            return Err(Error::parse(
                "index",
                format!("header announces {} records, found {}", header.records, records.len()),
            ));
        }
        Ok(Dataset::new(records))
    }
}

fn next_line<'a>(bytes: &'a [u8], cursor: &mut usize, what: &str) -> Result<&'a str> {
    let rest = &bytes[*cursor..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse("header", format!("missing {what} line")))?;
    *cursor += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|e| Error::parse("header", e))
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)?;
    Ok(buf)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    records: usize,
    payload_bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorEntry {
    id: PositionId,
    row: f64,
    col: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    id: PositionId,
    kind: MeasureKind,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    record: usize,
    panelist: String,
    modality: Modality,
    lighting: Lighting,
    angle: Angle,
    width: u32,
    height: u32,
    anchors: Vec<AnchorEntry>,
    labels: Vec<LabelEntry>,
    blob_offset: u64,
    blob_len: u64,
    sha256: String,
}

impl RecordMeta {
    fn into_record(self, payload: &[u8]) -> Result<Record> {
        let start = self.blob_offset as usize;
        let end = start
            .checked_add(self.blob_len as usize)
            .ok_or_else(|| Error::parse("blob", "offset overflow"))?;
        let blob = payload
            .get(start..end)
            .ok_or_else(|| Error::parse("blob", "pixel blob extends past end of file"))?;
        if hex::encode(Sha256::digest(blob)) != self.sha256 {
            return Err(Error::parse("blob", "pixel blob checksum mismatch"));
        }
        let pixels = image::load_from_memory_with_format(blob, image::ImageFormat::Png)
            .map_err(|e| Error::parse("blob", e))?
            .to_rgb8();
        if pixels.dimensions() != (self.width, self.height) {
            return Err(Error::parse(
                "blob",
                format!(
                    "decoded {:?}, index says {}x{}",
                    pixels.dimensions(),
                    self.width,
                    self.height
                ),
            ));
        }
        let image = FacialImage::new(pixels, self.modality, self.lighting, self.angle, self.panelist)?;
        let anchors = AnchorSet::from_entries(
            self.anchors
                .into_iter()
                .map(|a| (a.id, Coord::new(a.row, a.col))),
        )?;
        let mut labels: BTreeMap<PositionId, Vec<Measurement>> = BTreeMap::new();
        for l in self.labels {
            labels
                .entry(l.id)
                .or_default()
                .push(Measurement::new(l.kind, l.value)?);
        }
        Record::new(image, anchors, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_record() -> Record {
        let mut px = RgbImage::new(150, 160);
        for (x, y, p) in px.enumerate_pixels_mut() {
            *p = image::Rgb([(x % 251) as u8, (y % 241) as u8, ((x * y) % 239) as u8]);
        }
        let image = FacialImage::new(px, Modality::Selfie, Lighting::White, Angle::Front, "p7").unwrap();
        let d = PositionId::new(5).unwrap();
        let anchors = AnchorSet::from_entries([(d, Coord::new(80.0, 75.0))]).unwrap();
        let labels = BTreeMap::from([(
            d,
            vec![
                Measurement::new(MeasureKind::Tewl, 12.345678901234).unwrap(),
                Measurement::new(MeasureKind::Sh, 0.1 + 0.2).unwrap(),
            ],
        )]);
        Record::new(image, anchors, labels).unwrap()
    }

    #[test]
    fn empty_roundtrip() {
        let ds = Dataset::default();
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn record_roundtrip_is_exact() {
        let ds = Dataset::new(vec![tiny_record()]);
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_names_the_record() {
        let ds = Dataset::new(vec![tiny_record(), tiny_record()]);
        let bytes = ds.to_bytes().unwrap();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        let err = Dataset::from_bytes(&bytes[..40]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn corrupt_blob_names_the_record() {
        let ds = Dataset::new(vec![tiny_record(), tiny_record()]);
        let mut bytes = ds.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        match Dataset::from_bytes(&bytes).unwrap_err() {
            Error::Parse { context, .. } => assert_eq!(context, "record 1"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn labeled_anchor_must_be_croppable() {
        let rec = tiny_record();
        let d = PositionId::new(5).unwrap();
        let anchors = AnchorSet::from_entries([(d, Coord::new(10.0, 10.0))]).unwrap();
        assert!(Record::new(rec.image.clone(), anchors, rec.labels.clone()).is_err());
    }

    #[test]
    fn patches_have_modality_side() {
        let rec = tiny_record();
        let patches = rec.patches(MeasureKind::Tewl).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].side(), 140);
    }
}
