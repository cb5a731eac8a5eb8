//! Surround-camera BEV feature extraction: lift per-pixel features along
//! categorical depth, splat them into an ego-centered grid by sum pooling,
//! and encode the grid into a latent vector. Also the geometry-free
//! concatenation encoder used as the ablation baseline.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{gradcheck_inputs, normal_tensor, GradcheckReport};
use crate::autodiff::{Accumulation, ParamStore, ScatterPlan, Tape, Tensor, TrainingError, Var};
use crate::geometry::{build_frustum, frustum_to_ego, BevGridSpec, CameraRig, DepthBins, GeometryError, Mount, RigKind};
use crate::nn::{Bind, Conv, Dense, Init};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum BevError {
    #[error("invalid BEV configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Params(#[from] TrainingError),
}

/// How the encoded grid is reduced before the latent head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over all cells per channel.
    #[default]
    GlobalMean,
    /// Keep the coarse spatial layout and flatten it.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_bins: usize,
    /// Image-to-feature-map stride; must equal `2^image_channels.len()`.
    pub downsample: usize,
    pub grid: BevGridSpec,
    pub context_channels: usize,
    pub latent_dim: usize,
    /// Widths of the stride-2 image convolutions.
    pub image_channels: Vec<usize>,
    /// Widths of the stride-2 grid convolutions.
    pub bev_channels: Vec<usize>,
    pub pooling: Pooling,
    /// Append a normalized image-row channel so the depth head knows where
    /// the horizon is.
    pub coord_channel: bool,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            depth_min: 1.0,
            depth_max: 33.0,
            depth_bins: 16,
            downsample: 8,
            grid: BevGridSpec::default(),
            context_channels: 32,
            latent_dim: 128,
            image_channels: vec![16, 32, 32],
            bev_channels: vec![32, 64, 64, 128],
            pooling: Pooling::GlobalMean,
            coord_channel: true,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<(), BevError> {
        self.grid.validate()?;
        self.bins()?;
        if self.context_channels == 0 || self.latent_dim == 0 {
            return Err(BevError::Config("context_channels and latent_dim must be positive".into()));
        }
        if self.image_channels.is_empty() || self.image_channels.iter().chain(&self.bev_channels).any(|&c| c == 0) {
            return Err(BevError::Config("conv widths must be positive and image_channels non-empty".into()));
        }
        if self.downsample != 1 << self.image_channels.len() {
            return Err(BevError::Config(format!(
                "downsample {} needs {} stride-2 image layers, got {}",
                self.downsample,
                self.downsample.trailing_zeros(),
                self.image_channels.len()
            )));
        }
        Ok(())
    }

    /// Smallest useful block, for finite-difference checks.
    pub fn tiny() -> BevConfig {
        BevConfig {
            depth_min: 2.0,
            depth_max: 8.0,
            depth_bins: 2,
            downsample: 2,
            grid: BevGridSpec::new(16.0, 16.0, 2.0).expect("valid grid"),
            context_channels: 2,
            latent_dim: 3,
            image_channels: vec![2],
            bev_channels: vec![2],
            pooling: Pooling::GlobalMean,
            coord_channel: true,
        }
    }

    pub fn bins(&self) -> Result<DepthBins<f64>, BevError> {
        Ok(DepthBins::uniform(self.depth_min, self.depth_max, self.depth_bins)?)
    }

    fn image_input_channels(&self) -> usize {
        if self.coord_channel {
            4
        } else {
            3
        }
    }

    /// Spatial size of the grid after the stride-2 stack.
    fn encoded_grid(&self) -> (usize, usize) {
        let halve = |n: usize| self.bev_channels.iter().fold(n, |n, _| n.div_ceil(2));
        (halve(self.grid.nx()), halve(self.grid.ny()))
    }
}

/// Ego-grid cell of every frustum point, ordered `(cam, depth, row, col)`.
#[derive(Debug, Clone)]
pub struct SplatGeometry {
    grid: BevGridSpec,
    cells: Vec<Option<usize>>,
    accumulation: Accumulation,
    plans: RefCell<HashMap<usize, Rc<ScatterPlan>>>,
}

impl SplatGeometry {
    pub fn new(rig: &CameraRig<f64>, bins: &DepthBins<f64>, downsample: usize, grid: BevGridSpec) -> Result<Self, BevError> {
        grid.validate()?;
        let mut cells = Vec::new();
        for cam in &rig.cameras {
            let frustum = build_frustum(&cam.intrinsics, bins, downsample)?;
            for p in frustum_to_ego(&frustum, &cam.extrinsics) {
                cells.push(grid.cell_of(p[0], p[1]).map(|(i, j)| i * grid.ny() + j));
            }
        }
        Ok(Self { grid, cells, accumulation: Accumulation::InputOrder, plans: RefCell::default() })
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self.plans = RefCell::default();
        self
    }

    pub fn grid(&self) -> &BevGridSpec {
        &self.grid
    }

    pub fn points_per_batch_item(&self) -> usize {
        self.cells.len()
    }

    /// Cell (`row * ny + col`) of each point of one batch item; `None` when outside the grid.
    pub fn cells(&self) -> &[Option<usize>] {
        &self.cells
    }

    /// Cells that receive at least one point.
    pub fn observed_cells(&self) -> Vec<bool> {
        let mut seen = vec![false; self.grid.cells()];
        for c in self.cells.iter().flatten() {
            seen[*c] = true;
        }
        seen
    }

    /// Scatter plan for `batch` stacked items with `channels` features per point.
    pub fn plan(&self, batch: usize, channels: usize) -> Rc<ScatterPlan> {
        let key = batch * 1_000_003 + channels;
        self.plans
            .borrow_mut()
            .entry(key)
            .or_insert_with(|| {
                let n = self.grid.cells();
                let voxels: Vec<Option<usize>> =
                    (0..batch).flat_map(|b| self.cells.iter().map(move |c| c.map(|c| b * n + c))).collect();
                let shape = [batch, channels, self.grid.nx(), self.grid.ny()];
                Rc::new(ScatterPlan::new(&voxels, &shape).with_accumulation(self.accumulation))
            })
            .clone()
    }
}

/// Depth distribution `(N, D, fh, fw)` and per-cell context `(N, C, fh, fw)`
/// over `N = batch * cams` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftOutput {
    pub alpha: Var,
    pub context: Var,
}

/// Softmax over depth logits; the context is used as is.
pub fn lift_from_logits<T: Scalar>(t: &mut Tape<T>, depth_logits: Var, context: Var) -> LiftOutput {
    let alpha = t.softmax(depth_logits, 1);
    LiftOutput { alpha, context }
}

/// Point features `alpha(d) * context`, laid out `(N * D * fh * fw, C)`.
pub fn point_features<T: Scalar>(t: &mut Tape<T>, lift: LiftOutput) -> Var {
    let outer = t.depth_outer(lift.alpha, lift.context);
    let s = t.shape(outer).to_vec();
    t.reshape(outer, &[s[0] * s[1] * s[2] * s[3], s[4]])
}

/// Sum-pools lifted features into a `(batch, C, nx, ny)` grid.
pub fn splat<T: Scalar>(t: &mut Tape<T>, lift: LiftOutput, geometry: &SplatGeometry, batch: usize) -> Var {
    let points = point_features(t, lift);
    let channels = t.shape(points)[1];
    assert_eq!(
        t.shape(points)[0],
        batch * geometry.points_per_batch_item(),
        "contract violation: lifted point count does not match the splat geometry"
    );
    t.scatter_add(points, geometry.plan(batch, channels))
}

fn row_coordinates<T: Scalar>(t: &mut Tape<T>, images: usize, height: usize, width: usize) -> Var {
    let mut data = Vec::with_capacity(images * height * width);
    for _ in 0..images {
        for v in 0..height {
            let y = T::lit(2.0 * (v as f64 + 0.5) / height as f64 - 1.0);
            data.extend(std::iter::repeat(y).take(width));
        }
    }
    t.constant(&[images, 1, height, width], data)
}

/// Shared per-camera convolution stack.
#[derive(Debug, Clone)]
struct ImageStack {
    convs: Vec<Conv>,
    coord_channel: bool,
}

impl ImageStack {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &BevConfig, rng: &mut impl Rng) -> Result<Self, BevError> {
        let mut convs = Vec::new();
        let mut c_in = cfg.image_input_channels();
        for (i, &c) in cfg.image_channels.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{name}.conv{i}"), c_in, c, 3, 2, Init::Relu, rng)?);
            c_in = c;
        }
        Ok(Self { convs, coord_channel: cfg.coord_channel })
    }

    fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_channels)
    }

    /// `images: (B, cams, 3, H, W)` → `(B * cams, c, fh, fw)`.
    fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, images: Var) -> Var {
        let s = t.shape(images).to_vec();
        assert!(s.len() == 5 && s[2] == 3, "contract violation: images must be (B, cams, 3, H, W), got {s:?}");
        let n = s[0] * s[1];
        let mut x = t.reshape(images, &[n, 3, s[3], s[4]]);
        if self.coord_channel {
            let rows = row_coordinates(t, n, s[3], s[4]);
            x = t.concat(&[x, rows], 1);
        }
        for conv in &self.convs {
            let y = conv.forward(t, p, x);
            x = t.relu(y);
        }
        x
    }
}

/// Lift-splat BEV extractor.
#[derive(Debug, Clone)]
pub struct ScBlock {
    cfg: BevConfig,
    cams: usize,
    image_hw: (usize, usize),
    image: ImageStack,
    depth_head: Conv,
    context_head: Conv,
    bev_convs: Vec<Conv>,
    head: Dense,
    geometry: SplatGeometry,
}

impl ScBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BevConfig,
        rig: &CameraRig<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, BevError> {
        cfg.validate()?;
        let image = ImageStack::new(store, &format!("{name}.image"), cfg, rng)?;
        let c = image.out_channels();
        let depth_head = Conv::new(store, &format!("{name}.depth"), c, cfg.depth_bins, 1, 1, Init::Gain(1.0), rng)?;
        let context_head = Conv::new(store, &format!("{name}.context"), c, cfg.context_channels, 1, 1, Init::Gain(1.0), rng)?;
        let mut bev_convs = Vec::new();
        let mut c_in = cfg.context_channels;
        for (i, &c) in cfg.bev_channels.iter().enumerate() {
            bev_convs.push(Conv::new(store, &format!("{name}.grid{i}"), c_in, c, 3, 2, Init::Relu, rng)?);
            c_in = c;
        }
        let (gx, gy) = cfg.encoded_grid();
        let head_in = match cfg.pooling {
            Pooling::GlobalMean => c_in,
            Pooling::Flatten => c_in * gx * gy,
        };
        let head = Dense::new(store, &format!("{name}.head"), head_in, cfg.latent_dim, Init::Relu, rng)?;
        let intr = &rig.cameras[0].intrinsics;
        let mut block = Self {
            cfg: cfg.clone(),
            cams: 0,
            image_hw: (intr.height, intr.width),
            image,
            depth_head,
            context_head,
            bev_convs,
            head,
            geometry: SplatGeometry::new(rig, &cfg.bins()?, cfg.downsample, cfg.grid)?,
        };
        block.cams = rig.len();
        Ok(block)
    }

    /// Same parameters looking through a different rig.
    pub fn with_rig(&self, rig: &CameraRig<f64>) -> Result<Self, BevError> {
        let mut out = self.clone();
        out.geometry = SplatGeometry::new(rig, &self.cfg.bins()?, self.cfg.downsample, self.cfg.grid)?
            .with_accumulation(self.geometry.accumulation);
        out.cams = rig.len();
        let intr = &rig.cameras[0].intrinsics;
        out.image_hw = (intr.height, intr.width);
        Ok(out)
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.geometry = self.geometry.with_accumulation(accumulation);
        self
    }

    pub fn config(&self) -> &BevConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &SplatGeometry {
        &self.geometry
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn check_images<T: Scalar>(&self, t: &Tape<T>, images: Var) -> usize {
        let s = t.shape(images);
        assert!(
            s.len() == 5 && s[1] == self.cams && s[2] == 3 && (s[3], s[4]) == self.image_hw,
            "contract violation: images {s:?} for {} cameras of {:?}",
            self.cams,
            self.image_hw
        );
        s[0]
    }

    /// Depth distributions and context vectors for `images: (B, cams, 3, H, W)`.
    pub fn lift<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, images: Var) -> LiftOutput {
        self.check_images(t, images);
        let feats = self.image.forward(t, p, images);
        let logits = self.depth_head.forward(t, p, feats);
        let context = self.context_head.forward(t, p, feats);
        lift_from_logits(t, logits, context)
    }

    pub fn splat<T: Scalar>(&self, t: &mut Tape<T>, lift: LiftOutput, batch: usize) -> Var {
        splat(t, lift, &self.geometry, batch)
    }

    /// `(B, C, nx, ny)` grid → `(B, latent_dim)`.
    pub fn bev_encode<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, grid: Var) -> Var {
        let mut x = grid;
        for conv in &self.bev_convs {
            let y = conv.forward(t, p, x);
            x = t.relu(y);
        }
        let s = t.shape(x).to_vec();
        let pooled = match self.cfg.pooling {
            Pooling::GlobalMean => {
                let flat = t.reshape(x, &[s[0], s[1], s[2] * s[3]]);
                t.mean(flat, Some(2))
            }
            Pooling::Flatten => t.reshape(x, &[s[0], s[1] * s[2] * s[3]]),
        };
        let z = self.head.forward(t, p, pooled);
        t.relu(z)
    }

    /// Returns `(latent, grid)`.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, images: Var) -> (Var, Var) {
        let batch = self.check_images(t, images);
        let lift = self.lift(t, p, images);
        let grid = self.splat(t, lift, batch);
        (self.bev_encode(t, p, grid), grid)
    }
}

/// Per-camera convolutions, concatenated in camera order and projected.
#[derive(Debug, Clone)]
pub struct BaselineEncoder {
    cams: usize,
    image_hw: (usize, usize),
    latent_dim: usize,
    image: ImageStack,
    head: Dense,
}

impl BaselineEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BevConfig,
        rig: &CameraRig<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self, BevError> {
        cfg.validate()?;
        let intr = &rig.cameras[0].intrinsics;
        let (h, w) = (intr.height, intr.width);
        if h % cfg.downsample != 0 || w % cfg.downsample != 0 {
            return Err(BevError::Config(format!("downsample {} does not divide {h}x{w}", cfg.downsample)));
        }
        let image = ImageStack::new(store, &format!("{name}.image"), cfg, rng)?;
        let flat = rig.len() * image.out_channels() * (h / cfg.downsample) * (w / cfg.downsample);
        let head = Dense::new(store, &format!("{name}.head"), flat, cfg.latent_dim, Init::Relu, rng)?;
        Ok(Self { cams: rig.len(), image_hw: (h, w), latent_dim: cfg.latent_dim, image, head })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, images: Var) -> Var {
        let s = t.shape(images).to_vec();
        assert!(
            s.len() == 5 && s[1] == self.cams && (s[3], s[4]) == self.image_hw,
            "contract violation: images {s:?} for {} cameras of {:?}",
            self.cams,
            self.image_hw
        );
        let feats = self.image.forward(t, p, images);
        let per_item = t.value(feats).len() / s[0];
        let flat = t.reshape(feats, &[s[0], per_item]);
        let z = self.head.forward(t, p, flat);
        t.relu(z)
    }
}

/// The image channel of a policy: BEV or baseline.
#[derive(Debug, Clone)]
pub enum ImageExtractor {
    Bev(ScBlock),
    Baseline(BaselineEncoder),
}

impl ImageExtractor {
    pub fn latent_dim(&self) -> usize {
        match self {
            ImageExtractor::Bev(b) => b.latent_dim(),
            ImageExtractor::Baseline(b) => b.latent_dim(),
        }
    }

    /// Latent `(B, latent_dim)` plus the BEV grid when there is one.
    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, p: &mut Bind<T>, images: Var) -> (Var, Option<Var>) {
        match self {
            ImageExtractor::Bev(b) => {
                let (z, g) = b.forward(t, p, images);
                (z, Some(g))
            }
            ImageExtractor::Baseline(b) => (b.forward(t, p, images), None),
        }
    }

    pub fn as_bev(&self) -> Option<&ScBlock> {
        match self {
            ImageExtractor::Bev(b) => Some(b),
            ImageExtractor::Baseline(_) => None,
        }
    }
}

/// Finite-difference check of a whole 2-camera, 4x8-pixel, 2-bin block with
/// respect to its images and every parameter; the checked output is the
/// latent concatenated with the flattened grid.
pub fn sc_block_gradcheck(seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let mut r = CameraRig::standard(RigKind::Surround3x120, 8, 4, Mount::default()).expect("valid rig");
    r.cameras.truncate(2);
    let block = ScBlock::new(&mut store, "bev", &BevConfig::tiny(), &r, &mut rng).expect("valid block");
    let ids: Vec<_> = store.ids().collect();
    let mut inputs = vec![Tensor::new(&[1, 2, 3, 4, 8], (0..192).map(|_| rng.gen::<f64>()).collect())];
    inputs.extend(ids.iter().map(|&id| {
        let shape = store.tensor(id).shape.clone();
        normal_tensor(&shape, &mut rng)
    }));
    let build = move |t: &mut Tape<f64>, xs: &[Var]| {
        let mut p = Bind::new(&store);
        for (&id, &v) in ids.iter().zip(&xs[1..]) {
            p = p.preset(id, v);
        }
        let (z, g) = block.forward(t, &mut p, xs[0]);
        let gs = t.value(g).len();
        let g = t.reshape(g, &[1, gs]);
        t.concat(&[z, g], 1)
    };
    gradcheck_inputs("sc_block", &build, &inputs, seed, None)
}
