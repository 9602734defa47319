//! Dataset ingestion, synthetic generation, client partitioning, trigger
//! injection and malicious-shard construction.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::numerics::norm2;
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file")]
    TruncatedFile,
    #[error("trigger geometry incompatible with sample: {0}")]
    GeometryMismatch(String),
    #[error("not enough samples to partition: {0}")]
    InsufficientData(String),
    #[error("shard has only {available} samples of source class, need {needed}")]
    InsufficientSourceSamples { available: usize, needed: usize },
    #[error("could not place {clusters} cluster centers with separation {separation} in {attempts} attempts")]
    InfeasibleGeometry { clusters: usize, separation: f64, attempts: usize },
}

/// Image layout for pixel-level trigger placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone)]
enum Storage {
    /// Pixels quantized to 0..=255; exposed as value/255 in [0, 1].
    Bytes(Vec<u8>),
    /// Raw 64-bit values (synthetic clusterable data; not confined to [0, 1]).
    Floats(Vec<f64>),
}

/// An in-memory labeled dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    n: usize,
    dim: usize,
    storage: Storage,
    labels: Vec<u8>,
    classes: usize,
    geometry: Option<ImageGeometry>,
}

impl Dataset {
    pub fn from_bytes(
        pixels: Vec<u8>,
        labels: Vec<u8>,
        classes: usize,
        geometry: ImageGeometry,
    ) -> Self {
        let dim = geometry.dim();
        let n = labels.len();
        assert_eq!(pixels.len(), n * dim, "pixel buffer size mismatch");
        debug_assert!(labels.iter().all(|&l| (l as usize) < classes));
        Dataset { n, dim, storage: Storage::Bytes(pixels), labels, classes, geometry: Some(geometry) }
    }

    pub fn from_floats(values: Vec<f64>, labels: Vec<u8>, classes: usize, dim: usize) -> Self {
        let n = labels.len();
        assert_eq!(values.len(), n * dim, "value buffer size mismatch");
        Dataset { n, dim, storage: Storage::Floats(values), labels, classes, geometry: None }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn geometry(&self) -> Option<ImageGeometry> {
        self.geometry
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }

    pub fn sample_into(&self, idx: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim);
        match &self.storage {
            Storage::Bytes(b) => {
                let row = &b[idx * self.dim..(idx + 1) * self.dim];
                for (o, &p) in out.iter_mut().zip(row) {
                    *o = p as f64 / 255.0;
                }
            }
            Storage::Floats(f) => {
                out.copy_from_slice(&f[idx * self.dim..(idx + 1) * self.dim]);
            }
        }
    }

    pub fn sample(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(idx, &mut out);
        out
    }

    /// Indices of all samples carrying `label`.
    pub fn indices_of_label(&self, label: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.label(i) == label).collect()
    }

    /// Serialize into the shared checkpoint container.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let geom = self
            .geometry
            .map(|g| format!("{}x{}x{}", g.height, g.width, g.channels))
            .unwrap_or_else(|| "none".into());
        ck.put_text(
            "meta",
            &format!(
                "kind = dataset\nn = {}\ndim = {}\nclasses = {}\ngeometry = {}\nstorage = {}\n",
                self.n,
                self.dim,
                self.classes,
                geom,
                match self.storage {
                    Storage::Bytes(_) => "bytes",
                    Storage::Floats(_) => "floats",
                }
            ),
        );
        match &self.storage {
            Storage::Bytes(b) => ck.put_bytes("inputs_u8", b.clone()),
            Storage::Floats(f) => ck.put_f64s("inputs_f64", f),
        }
        ck.put_bytes("labels", self.labels.clone());
        ck
    }
}

/// Parse one IDX file header, returning (dims, payload offset).
fn read_idx_header(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, usize), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::TruncatedFile);
    }
    let got = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if got != expected_magic {
        return Err(DataError::BadMagic { expected: expected_magic, got });
    }
    let ndims = (got & 0xff) as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(DataError::TruncatedFile);
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    Ok((dims, header_len))
}

/// Load an IDX image/label pair (EMNIST/MNIST layout) into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut image_bytes = Vec::new();
    fs::File::open(images_path)?.read_to_end(&mut image_bytes)?;
    let mut label_bytes = Vec::new();
    fs::File::open(labels_path)?.read_to_end(&mut label_bytes)?;

    let (img_dims, img_off) = read_idx_header(&image_bytes, IDX_IMAGES_MAGIC)?;
    let (lbl_dims, lbl_off) = read_idx_header(&label_bytes, IDX_LABELS_MAGIC)?;
    let (n_images, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    let n_labels = lbl_dims[0];
    if n_images != n_labels {
        return Err(DataError::CountMismatch { images: n_images, labels: n_labels });
    }
    let pixel_count = n_images * rows * cols;
    if image_bytes.len() < img_off + pixel_count || label_bytes.len() < lbl_off + n_labels {
        return Err(DataError::TruncatedFile);
    }
    let pixels = image_bytes[img_off..img_off + pixel_count].to_vec();
    let labels = label_bytes[lbl_off..lbl_off + n_labels].to_vec();
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Ok(Dataset::from_bytes(pixels, labels, classes, ImageGeometry {
        height: rows,
        width: cols,
        channels: 1,
    }))
}

/// Which corner a pixel-square trigger occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    BottomRight,
    BottomLeft,
    TopRight,
    TopLeft,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TriggerKind {
    /// `size` x `size` block of trigger-valued pixels in a corner.
    PixelSquare { size: usize, corner: Corner },
    /// Trigger-valued pixels along the main diagonal.
    Diagonal,
    /// `count` seeded random positions set to the trigger value.
    RandomPixels { count: usize, seed: u64 },
    /// Column sinusoid: x + (amplitude/255) * sin(2*pi*frequency*col/width),
    /// clamped to [0, 1]. Amplitude is stated on the 0..255 raw-pixel scale.
    PeriodicSine { amplitude: f64, frequency: f64 },
}

/// A backdoor trigger plus its target label.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub target_label: usize,
    /// Pixel value written by the pixel-style triggers; 0.0 = black on the
    /// white-background convention, set to 1.0 for inverted datasets.
    pub pixel_value: f64,
}

impl TriggerSpec {
    pub fn black_square(size: usize, target_label: usize) -> Self {
        TriggerSpec {
            kind: TriggerKind::PixelSquare { size, corner: Corner::BottomRight },
            target_label,
            pixel_value: 0.0,
        }
    }
}

fn square_origin(corner: Corner, geometry: ImageGeometry, size: usize) -> (usize, usize) {
    match corner {
        Corner::BottomRight => (geometry.height - size, geometry.width - size),
        Corner::BottomLeft => (geometry.height - size, 0),
        Corner::TopRight => (0, geometry.width - size),
        Corner::TopLeft => (0, 0),
    }
}

/// Apply a trigger to one sample (unit-scaled pixels, row-major, channel-last).
pub fn apply_trigger(
    sample: &[f64],
    geometry: ImageGeometry,
    trigger: &TriggerSpec,
) -> Result<Vec<f64>, DataError> {
    if sample.len() != geometry.dim() {
        return Err(DataError::GeometryMismatch(format!(
            "sample length {} vs geometry {}x{}x{}",
            sample.len(),
            geometry.height,
            geometry.width,
            geometry.channels
        )));
    }
    let mut out = sample.to_vec();
    let chans = geometry.channels;
    let put = |row: usize, col: usize, value: f64, out: &mut Vec<f64>| {
        let base = (row * geometry.width + col) * chans;
        for c in 0..chans {
            out[base + c] = value;
        }
    };
    match &trigger.kind {
        TriggerKind::PixelSquare { size, corner } => {
            if *size > geometry.height || *size > geometry.width {
                return Err(DataError::GeometryMismatch(format!(
                    "square size {size} exceeds image {}x{}",
                    geometry.height, geometry.width
                )));
            }
            let (r0, c0) = square_origin(*corner, geometry, *size);
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    put(r, c, trigger.pixel_value, &mut out);
                }
            }
        }
        TriggerKind::Diagonal => {
            let len = geometry.height.min(geometry.width);
            for i in 0..len {
                put(i, i, trigger.pixel_value, &mut out);
            }
        }
        TriggerKind::RandomPixels { count, seed } => {
            let total = geometry.height * geometry.width;
            if *count > total {
                return Err(DataError::GeometryMismatch(format!(
                    "{count} trigger pixels exceed image size {total}"
                )));
            }
            let mut positions: Vec<usize> = (0..total).collect();
            let mut trigger_rng = rng::stream(*seed, &[rng::tags::TRIGGER]);
            positions.shuffle(&mut trigger_rng);
            for &p in positions.iter().take(*count) {
                put(p / geometry.width, p % geometry.width, trigger.pixel_value, &mut out);
            }
        }
        TriggerKind::PeriodicSine { amplitude, frequency } => {
            let amp = amplitude / 255.0;
            for r in 0..geometry.height {
                for c in 0..geometry.width {
                    let delta =
                        amp * (2.0 * std::f64::consts::PI * frequency * c as f64 / geometry.width as f64).sin();
                    let base = (r * geometry.width + c) * chans;
                    for ch in 0..chans {
                        out[base + ch] = (out[base + ch] + delta).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A backdoored sample overriding one shard position.
#[derive(Debug, Clone)]
pub struct BackdoorSample {
    pub shard_pos: usize,
    pub input: Vec<f64>,
    pub label: u8,
}

/// One client's slice of the dataset, with optional backdoor overrides.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<u32>,
    pub malicious: bool,
    pub backdoor: Vec<BackdoorSample>,
}

impl ClientShard {
    pub fn clean(client_id: usize, indices: Vec<u32>) -> Self {
        ClientShard { client_id, indices, malicious: false, backdoor: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn override_at(&self, pos: usize) -> Option<&BackdoorSample> {
        self.backdoor.iter().find(|b| b.shard_pos == pos)
    }

    pub fn label_at(&self, pos: usize, dataset: &Dataset) -> usize {
        match self.override_at(pos) {
            Some(b) => b.label as usize,
            None => dataset.label(self.indices[pos] as usize),
        }
    }

    pub fn sample_at(&self, pos: usize, dataset: &Dataset) -> Vec<f64> {
        match self.override_at(pos) {
            Some(b) => b.input.clone(),
            None => dataset.sample(self.indices[pos] as usize),
        }
    }

    /// Shard positions holding a given label (overrides included).
    pub fn positions_of_label(&self, label: usize, dataset: &Dataset) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.label_at(p, dataset) == label).collect()
    }
}

/// How the dataset is split across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    /// Seeded shuffle, equal contiguous shards.
    Homogeneous,
    /// First `h` fraction shuffled evenly; the rest as 4 random classes per
    /// client with floor(per_client * (1-h) / 4) samples of each.
    HHeterogeneous { h: f64 },
    /// Contiguous shards in file order (natural-shard proxy).
    ByWriter,
}

/// Split a dataset into `n_clients` shards.
pub fn partition(
    dataset: &Dataset,
    n_clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<Vec<ClientShard>, DataError> {
    let n = dataset.len();
    if n_clients == 0 || n < n_clients {
        return Err(DataError::InsufficientData(format!(
            "{n} samples cannot fill {n_clients} clients"
        )));
    }
    let per_client = n / n_clients;
    match mode {
        PartitionMode::Homogeneous => {
            let mut indices: Vec<u32> = (0..n as u32).collect();
            let mut shuffle_rng = rng::stream(seed, &[rng::tags::PARTITION]);
            indices.shuffle(&mut shuffle_rng);
            Ok(split_evenly(&indices, n_clients))
        }
        PartitionMode::ByWriter => {
            let indices: Vec<u32> = (0..n as u32).collect();
            Ok(split_evenly(&indices, n_clients))
        }
        PartitionMode::HHeterogeneous { h } => {
            assert!((0.0..=1.0).contains(&h), "heterogeneity level must be in [0, 1]");
            let mut part_rng = rng::stream(seed, &[rng::tags::PARTITION]);
            let mut indices: Vec<u32> = (0..n as u32).collect();
            indices.shuffle(&mut part_rng);

            let shared_per_client = (per_client as f64 * h).round() as usize;
            let shared_total = shared_per_client * n_clients;
            let per_class = (per_client as f64 * (1.0 - h) / 4.0).floor() as usize;

            let (shared_pool, rest) = indices.split_at(shared_total.min(indices.len()));
            let mut class_pools: Vec<Vec<u32>> = vec![Vec::new(); dataset.classes()];
            for &idx in rest {
                class_pools[dataset.label(idx as usize)].push(idx);
            }

            let mut shards = Vec::with_capacity(n_clients);
            for client_id in 0..n_clients {
                let mut own: Vec<u32> = shared_pool
                    [client_id * shared_per_client..(client_id + 1) * shared_per_client]
                    .to_vec();
                if per_class > 0 {
                    // Random 4-class pick, biased to the fullest remaining
                    // pools so an exactly-tight supply still drains cleanly.
                    let mut classes: Vec<usize> = (0..dataset.classes()).collect();
                    classes.shuffle(&mut part_rng);
                    classes.sort_by_key(|&c| std::cmp::Reverse(class_pools[c].len()));
                    for &class in classes.iter().take(4) {
                        let pool = &mut class_pools[class];
                        if pool.len() < per_class {
                            return Err(DataError::InsufficientData(format!(
                                "class {class} pool exhausted at client {client_id}"
                            )));
                        }
                        own.extend(pool.drain(pool.len() - per_class..));
                    }
                }
                shards.push(ClientShard::clean(client_id, own));
            }
            Ok(shards)
        }
    }
}

fn split_evenly(indices: &[u32], n_clients: usize) -> Vec<ClientShard> {
    let n = indices.len();
    let base = n / n_clients;
    let extra = n % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for client_id in 0..n_clients {
        let take = base + usize::from(client_id < extra);
        shards.push(ClientShard::clean(client_id, indices[cursor..cursor + take].to_vec()));
        cursor += take;
    }
    shards
}

/// Turn a shard malicious: re-label `count` source-class samples to the
/// trigger's target label with the trigger applied. Picks the first `count`
/// source-class positions for determinism.
pub fn make_malicious_shard(
    shard: &ClientShard,
    dataset: &Dataset,
    trigger: &TriggerSpec,
    source_label: usize,
    count: usize,
) -> Result<ClientShard, DataError> {
    let geometry = dataset.geometry().ok_or_else(|| {
        DataError::GeometryMismatch("trigger injection needs an image dataset".into())
    })?;
    let source_positions: Vec<usize> = (0..shard.len())
        .filter(|&p| dataset.label(shard.indices[p] as usize) == source_label)
        .collect();
    if source_positions.len() < count {
        return Err(DataError::InsufficientSourceSamples {
            available: source_positions.len(),
            needed: count,
        });
    }
    let mut out = shard.clone();
    out.malicious = true;
    out.backdoor.clear();
    for &pos in source_positions.iter().take(count) {
        let clean = dataset.sample(shard.indices[pos] as usize);
        let triggered = apply_trigger(&clean, geometry, trigger)?;
        out.backdoor.push(BackdoorSample {
            shard_pos: pos,
            input: triggered,
            label: trigger.target_label as u8,
        });
    }
    Ok(out)
}

/// Per-label keep fractions taking effect at a round boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub start_round: usize,
    pub keep_fractions: Vec<f64>,
}

/// Piecewise distribution-drift schedule.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl PhaseSchedule {
    /// Single static phase keeping everything.
    pub fn static_schedule(classes: usize) -> Self {
        PhaseSchedule { phases: vec![Phase { start_round: 0, keep_fractions: vec![1.0; classes] }] }
    }

    pub fn validate(&self, classes: usize) -> Result<(), String> {
        if self.phases.is_empty() {
            return Err("phase schedule must contain at least one phase".into());
        }
        if self.phases[0].start_round != 0 {
            return Err("first phase must start at round 0".into());
        }
        for w in self.phases.windows(2) {
            if w[1].start_round <= w[0].start_round {
                return Err("phase start rounds must be strictly increasing".into());
            }
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.keep_fractions.len() != classes {
                return Err(format!(
                    "phase {i} has {} keep fractions, expected {classes}",
                    p.keep_fractions.len()
                ));
            }
            if p.keep_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                return Err(format!("phase {i} keep fractions must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Index of the phase active at `round`.
    pub fn phase_at(&self, round: usize) -> usize {
        let mut active = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if p.start_round <= round {
                active = i;
            }
        }
        active
    }
}

/// Resample a shard for a new phase: per label, keep round(fraction * count)
/// of the client's phase-0 samples (seeded subsample, no duplication).
pub fn apply_phase(
    original: &ClientShard,
    dataset: &Dataset,
    keep_fractions: &[f64],
    drift_rng: &mut ChaCha8Rng,
) -> ClientShard {
    let mut kept: Vec<u32> = Vec::with_capacity(original.indices.len());
    for label in 0..keep_fractions.len() {
        let mut of_label: Vec<u32> = original
            .indices
            .iter()
            .copied()
            .filter(|&i| dataset.label(i as usize) == label)
            .collect();
        let keep = (keep_fractions[label] * of_label.len() as f64).round() as usize;
        if keep < of_label.len() {
            of_label.shuffle(drift_rng);
            of_label.truncate(keep);
            of_label.sort_unstable();
        }
        kept.extend(of_label);
    }
    ClientShard::clean(original.client_id, kept)
}

/// Synthetic clusterable dataset: M tight, well-separated, label-consistent
/// clusters with unit-norm centers.
pub struct Clusterable {
    pub dataset: Dataset,
    pub centers: Vec<Vec<f64>>,
    /// Cluster index of every sample, in dataset order.
    pub cluster_of: Vec<usize>,
}

/// Generate an (epsilon0, M)-clusterable dataset. Centers are resampled until
/// all pairwise distances reach 2*eps0 + eps1; cluster j carries class j mod L.
pub fn gen_clusterable(
    clusters: usize,
    n: usize,
    dim: usize,
    eps0: f64,
    eps1: f64,
    classes: usize,
    seed: u64,
) -> Result<Clusterable, DataError> {
    assert!(clusters >= 1 && n % clusters == 0, "cluster count must divide sample count");
    let separation = 2.0 * eps0 + eps1;
    let mut center_rng = rng::stream(seed, &[rng::tags::DATASET, 0]);
    const MAX_ATTEMPTS: usize = 1000;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut placed = false;
    for _ in 0..MAX_ATTEMPTS {
        centers.clear();
        for _ in 0..clusters {
            let mut c: Vec<f64> =
                (0..dim).map(|_| StandardNormal.sample(&mut center_rng)).collect();
            let norm = norm2(&c).max(f64::MIN_POSITIVE);
            for x in c.iter_mut() {
                *x /= norm;
            }
            centers.push(c);
        }
        let ok = (0..clusters).all(|i| {
            (i + 1..clusters).all(|j| {
                let d2: f64 =
                    centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= separation
            })
        });
        if ok {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(DataError::InfeasibleGeometry { clusters, separation, attempts: MAX_ATTEMPTS });
    }

    let per_cluster = n / clusters;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut cluster_of = Vec::with_capacity(n);
    let mut noise_rng = rng::stream(seed, &[rng::tags::DATASET, 1]);
    for cluster in 0..clusters {
        for _ in 0..per_cluster {
            // Uniform direction, radius scaled for uniformity in the ball.
            let mut noise: Vec<f64> =
                (0..dim).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            let norm = norm2(&noise).max(f64::MIN_POSITIVE);
            let radius = eps0 * (noise_rng.gen::<f64>()).powf(1.0 / dim as f64);
            for (x, c) in noise.iter_mut().zip(&centers[cluster]) {
                *x = c + *x / norm * radius;
            }
            values.extend_from_slice(&noise);
            labels.push((cluster % classes) as u8);
            cluster_of.push(cluster);
        }
    }
    Ok(Clusterable {
        dataset: Dataset::from_floats(values, labels, classes, dim),
        centers,
        cluster_of,
    })
}

/// Parameters for the desk-scale synthetic image task (EMNIST-shaped: 10-class
/// 28x28 grayscale). Each class owns a few smoothed random templates; samples
/// are a template plus pixel noise, quantized like scanned image data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImageSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    pub modes_per_class: usize,
    /// Template contrast around mid-gray; higher separates classes more.
    pub contrast: f64,
    /// Per-pixel Gaussian noise sigma in [0, 1] units.
    pub noise: f64,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        SyntheticImageSpec {
            classes: 10,
            height: 28,
            width: 28,
            samples: 50_000,
            modes_per_class: 3,
            contrast: 0.35,
            noise: 0.20,
        }
    }
}

/// Box-blur a field a few times to get spatially coherent blobs.
fn smooth_field(field: &mut [f64], height: usize, width: usize, passes: usize) {
    let mut tmp = vec![0.0; field.len()];
    for _ in 0..passes {
        for r in 0..height {
            for c in 0..width {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = r as i64 + dr;
                        let cc = c as i64 + dc;
                        if rr >= 0 && rr < height as i64 && cc >= 0 && cc < width as i64 {
                            acc += field[rr as usize * width + cc as usize];
                            count += 1.0;
                        }
                    }
                }
                tmp[r * width + c] = acc / count;
            }
        }
        field.copy_from_slice(&tmp);
    }
}

/// Generate the synthetic image dataset (u8-quantized pixels).
pub fn gen_synthetic_images(spec: &SyntheticImageSpec, seed: u64, stream_tag: u64) -> Dataset {
    let dim = spec.height * spec.width;
    let mut template_rng = rng::stream(seed, &[rng::tags::DATASET, 2]);
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(spec.classes * spec.modes_per_class);
    for _ in 0..spec.classes * spec.modes_per_class {
        let mut field: Vec<f64> =
            (0..dim).map(|_| StandardNormal.sample(&mut template_rng)).collect();
        smooth_field(&mut field, spec.height, spec.width, 2);
        // Normalize field to unit RMS then shape around mid-gray.
        let rms = (field.iter().map(|x| x * x).sum::<f64>() / dim as f64).sqrt().max(1e-12);
        let template: Vec<f64> =
            field.iter().map(|x| (0.5 + spec.contrast * x / rms).clamp(0.0, 1.0)).collect();
        templates.push(template);
    }

    let mut sample_rng = rng::stream(seed, &[rng::tags::DATASET, stream_tag]);
    let mut pixels = Vec::with_capacity(spec.samples * dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let mode = sample_rng.gen_range(0..spec.modes_per_class);
        let template = &templates[class * spec.modes_per_class + mode];
        for &t in template {
            let draw: f64 = StandardNormal.sample(&mut sample_rng);
            let noisy = t + spec.noise * draw;
            pixels.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(class as u8);
    }
    Dataset::from_bytes(pixels, labels, spec.classes, ImageGeometry {
        height: spec.height,
        width: spec.width,
        channels: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny_dataset() -> Dataset {
        // 12 samples, 4x4 images, 3 classes.
        let geometry = ImageGeometry { height: 4, width: 4, channels: 1 };
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12u8 {
            pixels.extend(std::iter::repeat(10 * i + 5).take(16));
            labels.push(i % 3);
        }
        Dataset::from_bytes(pixels, labels, 3, geometry)
    }

    /// Build an in-memory IDX pair byte-for-byte and parse it back.
    #[test]
    fn idx_fixture_roundtrip() {
        let dir = std::env::temp_dir().join("shadowfl_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");

        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes()); // n
        images.extend_from_slice(&2u32.to_be_bytes()); // rows
        images.extend_from_slice(&3u32.to_be_bytes()); // cols
        let pixel_payload: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6];
        images.extend_from_slice(&pixel_payload);

        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7u8, 1u8]);

        std::fs::write(&images_path, &images).unwrap();
        std::fs::write(&labels_path, &labels).unwrap();

        let ds = load_idx(&images_path, &labels_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.label(1), 1);
        // Exact pixel recovery through the 1/255 scaling.
        let s0 = ds.sample(0);
        for (got, want) in s0.iter().zip(pixel_payload[..6].iter()) {
            assert_eq!(*got, *want as f64 / 255.0);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("shadowfl_idx_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");

        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.extend_from_slice(&1u32.to_be_bytes());
        images.push(42);
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[0u8, 1u8]);
        std::fs::write(&images_path, &images).unwrap();
        std::fs::write(&labels_path, &labels).unwrap();

        match load_idx(&images_path, &labels_path) {
            Err(DataError::CountMismatch { images: 1, labels: 2 }) => {}
            other => panic!("expected CountMismatch, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("shadowfl_idx_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let images_path = dir.join("images.idx");
        let labels_path = dir.join("labels.idx");
        std::fs::write(&images_path, 0xdeadbeefu32.to_be_bytes()).unwrap();
        std::fs::write(&labels_path, IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        assert!(matches!(
            load_idx(&images_path, &labels_path),
            Err(DataError::BadMagic { expected: IDX_IMAGES_MAGIC, .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pixel_square_changes_exactly_bottom_right_block() {
        let geometry = ImageGeometry { height: 28, width: 28, channels: 1 };
        let sample = vec![0.7; geometry.dim()];
        let trigger = TriggerSpec::black_square(5, 1);
        let out = apply_trigger(&sample, geometry, &trigger).unwrap();
        let mut changed = Vec::new();
        for r in 0..28 {
            for c in 0..28 {
                if out[r * 28 + c] != sample[r * 28 + c] {
                    changed.push((r, c));
                }
            }
        }
        assert_eq!(changed.len(), 25);
        for &(r, c) in &changed {
            assert!((23..28).contains(&r) && (23..28).contains(&c), "pixel ({r},{c}) out of corner");
        }
        // Idempotence for pixel triggers.
        let twice = apply_trigger(&out, geometry, &trigger).unwrap();
        assert_eq!(out, twice);
    }

    #[test]
    fn diagonal_and_random_triggers_touch_expected_pixels() {
        let geometry = ImageGeometry { height: 8, width: 8, channels: 1 };
        let sample = vec![0.5; 64];

        let diag = TriggerSpec {
            kind: TriggerKind::Diagonal,
            target_label: 1,
            pixel_value: 0.0,
        };
        let out = apply_trigger(&sample, geometry, &diag).unwrap();
        for i in 0..8 {
            assert_eq!(out[i * 8 + i], 0.0);
        }
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), 8);

        let rand_trigger = TriggerSpec {
            kind: TriggerKind::RandomPixels { count: 25, seed: 3 },
            target_label: 1,
            pixel_value: 0.0,
        };
        let out = apply_trigger(&sample, geometry, &rand_trigger).unwrap();
        assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), 25);
        // Same seed, same pattern.
        let again = apply_trigger(&sample, geometry, &rand_trigger).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn periodic_sine_is_row_constant_and_bounded() {
        let geometry = ImageGeometry { height: 6, width: 16, channels: 1 };
        let zero = vec![0.5; geometry.dim()];
        let trigger = TriggerSpec {
            kind: TriggerKind::PeriodicSine { amplitude: 8.0, frequency: 10.0 },
            target_label: 1,
            pixel_value: 0.0,
        };
        let out = apply_trigger(&zero, geometry, &trigger).unwrap();
        for c in 0..16 {
            for r in 1..6 {
                assert_eq!(out[r * 16 + c], out[c], "column {c} not row-constant");
            }
        }
        let linf = out
            .iter()
            .zip(&zero)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(linf <= 8.0 / 255.0 + 1e-12);
        assert!(linf > 0.0);
    }

    #[test]
    fn partition_homogeneous_preserves_multiset() {
        let ds = tiny_dataset();
        let shards = partition(&ds, 3, PartitionMode::Homogeneous, 5).unwrap();
        assert_eq!(shards.len(), 3);
        let mut seen: Vec<u32> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12u32).collect::<Vec<_>>());
        for s in &shards {
            assert_eq!(s.len(), 4);
        }
    }

    #[test]
    fn partition_h_zero_gives_four_classes_each() {
        // 40 clients x 100 samples, 10 classes.
        let geometry = ImageGeometry { height: 2, width: 2, channels: 1 };
        let n = 4000;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            pixels.extend_from_slice(&[0, 0, 0, 0]);
            labels.push((i % 10) as u8);
        }
        let ds = Dataset::from_bytes(pixels, labels, 10, geometry);
        let shards = partition(&ds, 40, PartitionMode::HHeterogeneous { h: 0.0 }, 9).unwrap();
        for s in &shards {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &s.indices {
                *counts.entry(ds.label(i as usize)).or_default() += 1;
            }
            assert_eq!(counts.len(), 4, "client {} classes {:?}", s.client_id, counts);
            for (_, c) in counts {
                assert_eq!(c, 25);
            }
        }
    }

    #[test]
    fn partition_h_one_matches_homogeneous_shape() {
        let ds = tiny_dataset();
        let shards = partition(&ds, 3, PartitionMode::HHeterogeneous { h: 1.0 }, 5).unwrap();
        for s in &shards {
            assert_eq!(s.len(), 4);
        }
        let mut seen: Vec<u32> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12u32).collect::<Vec<_>>());
    }

    #[test]
    fn malicious_shard_rewrites_exactly_count_samples() {
        let ds = tiny_dataset(); // labels 0,1,2,0,1,2,...
        let shard = ClientShard::clean(0, (0..12u32).collect());
        let trigger = TriggerSpec::black_square(2, 1);
        let mal = make_malicious_shard(&shard, &ds, &trigger, 0, 3).unwrap();
        assert!(mal.malicious);
        assert_eq!(mal.backdoor.len(), 3);
        let mut backdoored = 0;
        for pos in 0..mal.len() {
            let label = mal.label_at(pos, &ds);
            let clean_label = ds.label(mal.indices[pos] as usize);
            if label != clean_label {
                backdoored += 1;
                assert_eq!(label, 1);
                assert_eq!(clean_label, 0);
            }
        }
        assert_eq!(backdoored, 3);

        // count = 0 leaves data untouched but flags the shard.
        let mal0 = make_malicious_shard(&shard, &ds, &trigger, 0, 0).unwrap();
        assert!(mal0.malicious);
        assert!(mal0.backdoor.is_empty());

        // Asking for more source samples than exist fails.
        assert!(matches!(
            make_malicious_shard(&shard, &ds, &trigger, 0, 5),
            Err(DataError::InsufficientSourceSamples { available: 4, needed: 5 })
        ));
    }

    #[test]
    fn clusterable_geometry_and_labels() {
        let eps0 = 0.05;
        let eps1 = 0.2;
        let c = gen_clusterable(4, 200, 16, eps0, eps1, 2, 11).unwrap();
        assert_eq!(c.dataset.len(), 200);
        // Unit-norm centers with the required separation.
        for (i, a) in c.centers.iter().enumerate() {
            assert!((norm2(a) - 1.0).abs() < 1e-9);
            for b in c.centers.iter().skip(i + 1) {
                let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!(d >= 2.0 * eps0 + eps1);
            }
        }
        // Every sample within eps0 of its center; label consistent per cluster.
        for i in 0..c.dataset.len() {
            let cluster = c.cluster_of[i];
            let s = c.dataset.sample(i);
            let d: f64 = s
                .iter()
                .zip(&c.centers[cluster])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(d <= eps0 + 1e-12);
            assert_eq!(c.dataset.label(i), cluster % 2);
        }
    }

    #[test]
    fn clusterable_zero_noise_hits_centers_exactly() {
        let c = gen_clusterable(2, 10, 8, 0.0, 0.3, 2, 3).unwrap();
        for i in 0..c.dataset.len() {
            let s = c.dataset.sample(i);
            assert_eq!(s, c.centers[c.cluster_of[i]]);
        }
    }

    #[test]
    fn clusterable_infeasible_geometry_errors() {
        // 50 unit vectors in 2 dims with huge separation cannot exist.
        assert!(matches!(
            gen_clusterable(50, 50, 2, 0.4, 1.0, 2, 1),
            Err(DataError::InfeasibleGeometry { .. })
        ));
    }

    #[test]
    fn phase_schedule_validation_and_application() {
        let schedule = PhaseSchedule {
            phases: vec![
                Phase { start_round: 0, keep_fractions: vec![1.0, 1.0, 1.0] },
                Phase { start_round: 400, keep_fractions: vec![1.0, 0.1, 1.0] },
            ],
        };
        assert!(schedule.validate(3).is_ok());
        assert_eq!(schedule.phase_at(0), 0);
        assert_eq!(schedule.phase_at(399), 0);
        assert_eq!(schedule.phase_at(400), 1);
        assert_eq!(schedule.phase_at(1000), 1);

        let bad = PhaseSchedule {
            phases: vec![Phase { start_round: 5, keep_fractions: vec![1.0, 1.0, 1.0] }],
        };
        assert!(bad.validate(3).is_err());

        let ds = tiny_dataset(); // 4 samples per label over labels 0..3
        let shard = ClientShard::clean(0, (0..12u32).collect());
        let mut drift_rng = rng::stream(1, &[rng::tags::DRIFT]);
        let drifted = apply_phase(&shard, &ds, &[1.0, 0.25, 1.0], &mut drift_rng);
        let count_label1 =
            drifted.indices.iter().filter(|&&i| ds.label(i as usize) == 1).count();
        assert_eq!(count_label1, 1); // round(0.25 * 4)
        assert_eq!(drifted.len(), 9);
        // Never exceeds the phase-0 counts.
        for label in 0..3 {
            let orig = shard.indices.iter().filter(|&&i| ds.label(i as usize) == label).count();
            let now = drifted.indices.iter().filter(|&&i| ds.label(i as usize) == label).count();
            assert!(now <= orig);
        }
    }

    #[test]
    fn synthetic_images_are_deterministic_and_separable() {
        let spec = SyntheticImageSpec { samples: 500, ..Default::default() };
        let a = gen_synthetic_images(&spec, 7, 3);
        let b = gen_synthetic_images(&spec, 7, 3);
        assert_eq!(a.sample(17), b.sample(17));
        assert_eq!(a.len(), 500);
        assert_eq!(a.classes(), 10);
        // Class means should differ more across classes than within.
        let mean = |label: usize| -> Vec<f64> {
            let idx = a.indices_of_label(label);
            let mut m = vec![0.0; a.dim()];
            for &i in &idx {
                for (acc, v) in m.iter_mut().zip(a.sample(i)) {
                    *acc += v;
                }
            }
            for v in m.iter_mut() {
                *v /= idx.len() as f64;
            }
            m
        };
        let m0 = mean(0);
        let m1 = mean(1);
        let dist: f64 = m0.iter().zip(&m1).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 1.0, "class means too close: {dist}");
    }
}
