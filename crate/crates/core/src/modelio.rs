//! Model files, quantized model files and MNIST IDX ingestion.
//!
//! A model file is the 8-byte magic `QNTMODEL`, a little-endian `u32` manifest
//! length, a TOML manifest, and the parameter payload: raw little-endian
//! `f32` blobs addressed by byte offset from the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2dLayer, DenseLayer, LayerSpec, Network, Padding};
use crate::qengine::QuantizedNetwork;
use crate::tensor::{RealTensor, Tensor};
use crate::trainer::Samples;

pub const MODEL_MAGIC: &[u8; 8] = b"QNTMODEL";
pub const FORMAT_VERSION: u32 = 1;
pub const LAYOUT: &str = "channels-first row-major";
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const FETCH_HINT: &str = "run scripts/fetch_mnist.sh or point MNIST_DIR at the IDX files";

/// Training metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub reg_lambda: f64,
    pub reg_p: u32,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestLayer {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layout: String,
    input_shape: Vec<usize>,
    meta: ModelMeta,
    #[serde(default)]
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub network: Network,
    pub meta: ModelMeta,
}

fn push_param(payload: &mut Vec<u8>, name: String, t: &RealTensor) -> ParamEntry {
    let offset = payload.len();
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    ParamEntry { name, shape: t.shape().to_vec(), offset, len: payload.len() - offset }
}

/// Fails only for seeds above `i64::MAX`, which TOML integers cannot hold.
pub fn encode_model(net: &Network, meta: &ModelMeta) -> Result<Vec<u8>> {
    if meta.seed > i64::MAX as u64 {
        return Err(Error::Config(format!("seed {} does not fit a signed 64-bit manifest integer", meta.seed)));
    }
    let mut payload = Vec::new();
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let mut entry = ManifestLayer {
                kind: layer.kind_name().to_string(),
                stride: None,
                window: None,
                padding: None,
                params: Vec::new(),
            };
            match layer {
                LayerSpec::Dense(d) => {
                    entry.params.push(push_param(&mut payload, format!("layers.{i}.weight"), &d.weights));
                    entry.params.push(push_param(&mut payload, format!("layers.{i}.bias"), &Tensor::from_vec(d.bias.clone())));
                }
                LayerSpec::Conv2d(c) => {
                    entry.stride = Some(c.stride);
                    entry.padding = Some(c.padding);
                    entry.params.push(push_param(&mut payload, format!("layers.{i}.weight"), &c.kernels));
                    entry.params.push(push_param(&mut payload, format!("layers.{i}.bias"), &Tensor::from_vec(c.bias.clone())));
                }
                LayerSpec::MaxPool { window, stride } => {
                    entry.window = Some(*window);
                    entry.stride = Some(*stride);
                }
                LayerSpec::Relu | LayerSpec::Softmax => {}
            }
            entry
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        layout: LAYOUT.to_string(),
        input_shape: net.input_shape().to_vec(),
        meta: meta.clone(),
        layers,
    };
    let text = toml::to_string(&manifest).expect("manifest is plain data");
    let mut out = Vec::with_capacity(12 + text.len() + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_param(payload: &[u8], entry: &ParamEntry) -> Result<RealTensor> {
    let elements: usize = entry.shape.iter().product();
    if entry.len != elements * 4 {
        return Err(Error::ByteCount { param: entry.name.clone(), expected: elements * 4, actual: entry.len });
    }
    let end = entry.offset.checked_add(entry.len).filter(|&e| e <= payload.len()).ok_or_else(|| {
        Error::Truncated(format!(
            "parameter `{}` needs bytes {}..{} of a {}-byte payload",
            entry.name,
            entry.offset,
            entry.offset.saturating_add(entry.len),
            payload.len()
        ))
    })?;
    let data = payload[entry.offset..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn dense_params(i: usize, entry: &ManifestLayer, payload: &[u8]) -> Result<(RealTensor, Vec<f32>)> {
    let [w, b] = entry.params.as_slice() else {
        return Err(Error::Malformed(format!("layer {i} ({}) needs weight and bias parameters", entry.kind)));
    };
    Ok((read_param(payload, w)?, read_param(payload, b)?.into_data()))
}

fn required<T: Copy>(v: Option<T>, i: usize, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::Malformed(format!("layer {i} is missing `{field}`")))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("model file has {} bytes, header needs 12", bytes.len())));
    }
    if &bytes[..8] != MODEL_MAGIC {
        return Err(Error::Malformed("not a model file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let Some(header) = bytes.get(12..12 + header_len) else {
        return Err(Error::Truncated(format!("manifest of {header_len} bytes runs past end of file")));
    };
    let payload = &bytes[12 + header_len..];
    let text = std::str::from_utf8(header).map_err(|e| Error::Malformed(format!("manifest is not UTF-8: {e}")))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
    let found = table
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Malformed("manifest has no format_version".into()))?;
    if found != FORMAT_VERSION as i64 {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: found.clamp(0, u32::MAX as i64) as u32 });
    }
    let manifest: Manifest = table.try_into().map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
    if manifest.layout != LAYOUT {
        return Err(Error::Malformed(format!("unsupported tensor layout `{}`", manifest.layout)));
    }
    let declared: usize = manifest.layers.iter().flat_map(|l| &l.params).map(|p| p.len).sum();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, entry) in manifest.layers.iter().enumerate() {
        let layer = match entry.kind.as_str() {
            "dense" => {
                let (w, b) = dense_params(i, entry, payload)?;
                LayerSpec::Dense(DenseLayer::new(w, b)?)
            }
            "conv2d" => {
                let (k, b) = dense_params(i, entry, payload)?;
                LayerSpec::Conv2d(Conv2dLayer::new(
                    k,
                    b,
                    required(entry.stride, i, "stride")?,
                    required(entry.padding, i, "padding")?,
                )?)
            }
            "maxpool" => LayerSpec::MaxPool {
                window: required(entry.window, i, "window")?,
                stride: required(entry.stride, i, "stride")?,
            },
            "relu" => LayerSpec::Relu,
            "softmax" => LayerSpec::Softmax,
            other => return Err(Error::Malformed(format!("layer {i} has unknown kind `{other}`"))),
        };
        layers.push(layer);
    }
    if declared != payload.len() {
        return Err(Error::Malformed(format!(
            "parameters declare {declared} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok(ModelFile { network: Network::new(manifest.input_shape, layers)?, meta: manifest.meta })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn save_model(net: &Network, meta: &ModelMeta, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(net, meta)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&fs::read(path)?)
}

/// Provenance of a quantized model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantMeta {
    pub net: String,
    pub policy: String,
    pub word_length: u32,
    pub reg_lambda: f64,
    pub reg_p: u32,
    pub calib_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModelFile {
    pub network: QuantizedNetwork,
    pub meta: QuantMeta,
}

#[derive(Deserialize)]
struct QuantizedFile {
    #[serde(default)]
    meta: QuantMeta,
    network: QuantizedNetwork,
}

#[derive(Serialize)]
struct QuantizedFileRef<'a> {
    format_version: u32,
    meta: &'a QuantMeta,
    network: &'a QuantizedNetwork,
}

pub fn encode_quantized(qnet: &QuantizedNetwork, meta: &QuantMeta) -> String {
    serde_json::to_string(&QuantizedFileRef { format_version: FORMAT_VERSION, meta, network: qnet }).expect("plain data")
}

pub fn decode_quantized(text: &str) -> Result<QuantizedModelFile> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("quantized model: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Malformed("quantized model has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: found.min(u32::MAX as u64) as u32 });
    }
    let file: QuantizedFile =
        serde_json::from_value(value).map_err(|e| Error::Malformed(format!("quantized model: {e}")))?;
    file.network.validate()?;
    Ok(QuantizedModelFile { network: file.network, meta: file.meta })
}

pub fn save_quantized(qnet: &QuantizedNetwork, meta: &QuantMeta, path: &Path) -> Result<()> {
    write_atomic(path, encode_quantized(qnet, meta).as_bytes())
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModelFile> {
    decode_quantized(&fs::read_to_string(path)?)
}

/// Images scaled to `[0, 1]` and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    /// `len x rows x cols`, row-major
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl MnistSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` as a `[1, rows, cols]` tensor.
    pub fn image(&self, i: usize) -> RealTensor {
        let n = self.pixels();
        Tensor::new(vec![1, self.rows, self.cols], self.images[i * n..][..n].to_vec()).unwrap()
    }

    pub fn samples(&self) -> Samples<'_> {
        Samples::new(&self.images, &self.labels, self.pixels()).unwrap()
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> MnistSet {
        let n = n.min(self.len());
        MnistSet {
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated(format!("{what} header ends after {} bytes", bytes.len())))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::WrongMagic { expected: IMAGE_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let needed = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < needed {
        return Err(Error::Truncated(format!(
            "image file declares {count} images of {rows}x{cols} but holds {} pixel bytes",
            body.len()
        )));
    }
    let pixels = body[..needed].iter().map(|&v| (v as f64 / 255.0) as f32).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::WrongMagic { expected: LABEL_MAGIC, found: magic });
    }
    let count = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated(format!("label file declares {count} labels but holds {}", body.len())));
    }
    if let Some(i) = body[..count].iter().position(|&l| l > 9) {
        return Err(Error::Malformed(format!("label {} at index {i} is not a digit", body[i])));
    }
    Ok(body[..count].to_vec())
}

fn read_data_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingData { path: path.to_path_buf(), hint: FETCH_HINT.into() });
    }
    Ok(fs::read(path)?)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistSet> {
    let (count, rows, cols, images) = parse_idx_images(&read_data_file(images_path)?)?;
    let labels = parse_idx_labels(&read_data_file(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::CountMismatch(format!("{count} images but {} labels", labels.len())));
    }
    Ok(MnistSet { images, labels, rows, cols })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads a split from a directory holding the four canonical IDX files.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<MnistSet> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;
    use proptest::prelude::*;

    fn image_fixture() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, 1, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 255, 51, 128]);
        b
    }

    fn label_fixture() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&1u32.to_be_bytes());
        b.push(7);
        b
    }

    #[test]
    fn idx_fixture_parses() {
        let (count, rows, cols, px) = parse_idx_images(&image_fixture()).unwrap();
        assert_eq!((count, rows, cols), (1, 2, 2));
        assert_eq!(px, vec![0.0, 1.0, 0.2, (128.0f64 / 255.0) as f32]);
        assert_eq!(parse_idx_labels(&label_fixture()).unwrap(), vec![7]);
    }

    #[test]
    fn idx_errors() {
        let mut labels = label_fixture();
        labels[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&labels),
            Err(Error::WrongMagic { expected: LABEL_MAGIC, found: IMAGE_MAGIC })
        ));
        let images = image_fixture();
        assert!(matches!(parse_idx_images(&images[..18]), Err(Error::Truncated(_))));
        assert!(matches!(parse_idx_images(&images[..10]), Err(Error::Truncated(_))));
        assert!(matches!(parse_idx_labels(&label_fixture()[..8]), Err(Error::Truncated(_))));
        let mut bad = label_fixture();
        bad[8] = 10;
        assert!(matches!(parse_idx_labels(&bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn every_magic_mutation_is_rejected() {
        for (bytes, parse) in [
            (image_fixture(), (|b: &[u8]| parse_idx_images(b).map(|_| ())) as fn(&[u8]) -> Result<()>),
            (label_fixture(), |b: &[u8]| parse_idx_labels(b).map(|_| ())),
        ] {
            assert!(parse(&bytes).is_ok());
            for pos in 0..4 {
                for v in 0..=255u8 {
                    if v == bytes[pos] {
                        continue;
                    }
                    let mut m = bytes.clone();
                    m[pos] = v;
                    assert!(matches!(parse(&m), Err(Error::WrongMagic { .. })), "byte {pos} = {v}");
                }
            }
        }
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = label_fixture();
        labels[7] = 2;
        labels.push(3);
        fs::write(dir.path().join("i"), image_fixture()).unwrap();
        fs::write(dir.path().join("l"), labels).unwrap();
        assert!(matches!(
            load_mnist_idx(&dir.path().join("i"), &dir.path().join("l")),
            Err(Error::CountMismatch(_))
        ));
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &dir.path().join("l")),
            Err(Error::MissingData { .. })
        ));
    }

    #[test]
    fn empty_network_round_trip() {
        let net = Network::empty(vec![3]);
        let bytes = encode_model(&net, &ModelMeta::default()).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.network, net);
        assert_eq!(encode_model(&back.network, &back.meta).unwrap(), bytes);
        let big = ModelMeta { seed: u64::MAX, ..Default::default() };
        assert!(matches!(encode_model(&net, &big), Err(Error::Config(_))));
    }

    #[test]
    fn mnistnet_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ModelMeta { reg_lambda: 1e-4, reg_p: 8, epochs: 30, seed: 3, preset: Some("mnistnet2".into()), ..Default::default() };
        for preset in [Preset::MnistNet1, Preset::MnistNet2] {
            let net = preset.build(3);
            let path = dir.path().join(format!("{preset}.qnt"));
            save_model(&net, &meta, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.network, net);
            assert_eq!(back.meta, meta);
        }
    }

    fn replace_manifest(bytes: &[u8], f: impl Fn(&str) -> String) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = f(std::str::from_utf8(&bytes[12..12 + len]).unwrap());
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        out
    }

    #[test]
    fn corrupted_files_give_distinct_errors() {
        let net = Network::new(
            vec![2],
            vec![LayerSpec::Dense(DenseLayer::new(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), vec![0.5]).unwrap())],
        )
        .unwrap();
        let bytes = encode_model(&net, &ModelMeta::default()).unwrap();

        let v2 = replace_manifest(&bytes, |t| t.replace("format_version = 1", "format_version = 2"));
        assert!(matches!(decode_model(&v2), Err(Error::VersionMismatch { expected: 1, found: 2 })));

        let short = replace_manifest(&bytes, |t| t.replacen("len = 8", "len = 4", 1));
        match decode_model(&short) {
            Err(Error::ByteCount { param, expected: 8, actual: 4 }) => assert_eq!(param, "layers.0.weight"),
            other => panic!("unexpected {other:?}"),
        }

        assert!(matches!(decode_model(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
        assert!(matches!(decode_model(&bytes[..10]), Err(Error::Truncated(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(Error::Malformed(_))));
    }

    fn arb_network() -> impl Strategy<Value = Network> {
        let bits = || any::<u32>().prop_map(f32::from_bits).prop_filter("finite", |v| v.is_finite());
        (1usize..4, 1usize..4, 1usize..4, prop::collection::vec(bits(), 200)).prop_map(|(c, k, h, pool)| {
            let mut it = pool.into_iter().cycle();
            let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<f32>>();
            let side = 4;
            let conv = Conv2dLayer::new(
                Tensor::new(vec![h, c, k, k], take(h * c * k * k)).unwrap(),
                take(h),
                1,
                Padding::Same,
            )
            .unwrap();
            let dense = DenseLayer::new(
                Tensor::new(vec![3, h * (side / 2) * (side / 2)], take(3 * h * 4)).unwrap(),
                take(3),
            )
            .unwrap();
            Network::new(
                vec![c, side, side],
                vec![
                    LayerSpec::Conv2d(conv),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { window: 2, stride: 2 },
                    LayerSpec::Dense(dense),
                    LayerSpec::Softmax,
                ],
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn random_networks_round_trip(net in arb_network(), seed in 0..=i64::MAX as u64, lambda in 0f64..1.0) {
            let meta = ModelMeta { reg_lambda: lambda, reg_p: 2, epochs: 1, seed, ..Default::default() };
            let back = decode_model(&encode_model(&net, &meta).unwrap()).unwrap();
            prop_assert_eq!(back.network, net);
            prop_assert_eq!(back.meta, meta);
        }
    }
}
