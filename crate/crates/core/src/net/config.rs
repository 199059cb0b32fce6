use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::fusion::FusionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    Gate,
    BiFuse,
    UniFuse,
    /// Mesh encoder only.
    MeshOnly,
    /// Image encoder only; its features are still decoded on the mesh.
    ImageOnly,
}

impl FusionVariant {
    pub fn uses_mesh(self) -> bool {
        self != FusionVariant::ImageOnly
    }

    pub fn uses_image(self) -> bool {
        self != FusionVariant::MeshOnly
    }

    pub fn kind(self) -> Option<FusionKind> {
        match self {
            FusionVariant::Gate => Some(FusionKind::Gate),
            FusionVariant::BiFuse => Some(FusionKind::BiFuse),
            FusionVariant::UniFuse => Some(FusionKind::UniFuse),
            FusionVariant::MeshOnly | FusionVariant::ImageOnly => None,
        }
    }

    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::MeshOnly,
        FusionVariant::ImageOnly,
        FusionVariant::Gate,
        FusionVariant::BiFuse,
        FusionVariant::UniFuse,
    ];
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Gate => "gate",
            FusionVariant::BiFuse => "bifuse",
            FusionVariant::UniFuse => "unifuse",
            FusionVariant::MeshOnly => "none",
            FusionVariant::ImageOnly => "image-only",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gate" | "gatefuse" => Ok(FusionVariant::Gate),
            "bifuse" => Ok(FusionVariant::BiFuse),
            "unifuse" => Ok(FusionVariant::UniFuse),
            "none" | "mesh-only" | "mesh_only" => Ok(FusionVariant::MeshOnly),
            "image-only" | "image_only" | "image" => Ok(FusionVariant::ImageOnly),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

/// Network shape and training knobs.
///
/// Encoder scale `k` lives at mesh level `mr_hi - k` and pairs with an image
/// feature map of `image_h / 2^(k+1)` rows. The decoder walks back up from
/// `mr_lo` to `mr_hi + extra_levels`; outputs are its `scales` finest levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub mr_hi: usize,
    pub mr_lo: usize,
    pub channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub extra_levels: usize,
    pub fusion: FusionVariant,
    pub scales: usize,
    pub loss_weights: Vec<f64>,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkConfig {
    /// 64×128 image, mesh levels 5 down to 2, GateFuse.
    pub fn toy() -> Self {
        Self {
            image_h: 64,
            image_w: 128,
            mr_hi: 5,
            mr_lo: 2,
            channels: vec![8, 16, 32, 64],
            decoder_channels: vec![64, 32, 16, 8],
            extra_levels: 0,
            fusion: FusionVariant::Gate,
            scales: 4,
            loss_weights: vec![1.0; 4],
            lr: 3e-3,
            seed: 0,
        }
    }

    /// Smallest useful network: 16×32 image, mesh levels 2 and 1.
    pub fn minimal() -> Self {
        Self {
            image_h: 16,
            image_w: 32,
            mr_hi: 2,
            mr_lo: 1,
            channels: vec![4, 8],
            decoder_channels: vec![8, 4],
            extra_levels: 0,
            fusion: FusionVariant::Gate,
            scales: 2,
            loss_weights: vec![1.0; 2],
            lr: 1e-3,
            seed: 0,
        }
    }

    /// Full-width layout for 256×512 panoramas, decoding up to level 7.
    pub fn full_256() -> Self {
        Self {
            image_h: 256,
            image_w: 512,
            mr_hi: 6,
            mr_lo: 2,
            channels: vec![64, 64, 128, 256, 512],
            decoder_channels: vec![1024, 512, 64, 32, 32, 32],
            extra_levels: 1,
            fusion: FusionVariant::Gate,
            scales: 6,
            loss_weights: vec![1.0; 6],
            lr: 2e-4,
            seed: 0,
        }
    }

    /// Full-width layout for 512×1024 panoramas, decoding up to level 8.
    pub fn full_512() -> Self {
        Self {
            image_h: 512,
            image_w: 1024,
            mr_hi: 7,
            mr_lo: 3,
            lr: 1e-4,
            ..Self::full_256()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "minimal" => Ok(Self::minimal()),
            "full-256" => Ok(Self::full_256()),
            "full-512" => Ok(Self::full_512()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn encoder_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn decoder_levels(&self) -> usize {
        self.decoder_channels.len()
    }

    /// Mesh level of the finest decoder output.
    pub fn mr_out(&self) -> usize {
        self.mr_hi + self.extra_levels
    }

    /// Mesh levels of the emitted outputs, ascending.
    pub fn output_mrs(&self) -> Vec<usize> {
        let top = self.mr_out();
        (top + 1 - self.scales..=top).collect()
    }

    /// Image feature map size `(h, w)` at encoder scale `k`.
    pub fn image_scale_size(&self, k: usize) -> (usize, usize) {
        (self.image_h >> (k + 1), self.image_w >> (k + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_w != 2 * self.image_h {
            return fail(format!(
                "image must be 2:1, got {}x{}",
                self.image_h, self.image_w
            ));
        }
        if self.mr_lo > self.mr_hi {
            return fail(format!("mr_lo {} above mr_hi {}", self.mr_lo, self.mr_hi));
        }
        let k = self.mr_hi - self.mr_lo + 1;
        if self.channels.len() != k {
            return fail(format!(
                "{} encoder widths for {k} mesh scales",
                self.channels.len()
            ));
        }
        if self.decoder_channels.len() != k + self.extra_levels {
            return fail(format!(
                "{} decoder widths for {} decoder levels",
                self.decoder_channels.len(),
                k + self.extra_levels
            ));
        }
        if self.channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return fail("channel widths must be positive".into());
        }
        let (h, _) = self.image_scale_size(k - 1);
        if h < 2 || !self.image_h.is_multiple_of(1 << k) {
            return fail(format!(
                "image height {} cannot be halved {k} times",
                self.image_h
            ));
        }
        if self.scales == 0 || self.scales > self.decoder_levels() {
            return fail(format!(
                "scales must be in 1..={}, got {}",
                self.decoder_levels(),
                self.scales
            ));
        }
        if self.loss_weights.len() != self.scales {
            return fail(format!(
                "{} loss weights for {} scales",
                self.loss_weights.len(),
                self.scales
            ));
        }
        if self.loss_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return fail("loss weights must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("bad learning rate {}", self.lr));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the toy defaults. `#` starts a
    /// comment; lists are comma separated. A `preset` key, if present, must
    /// come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut decoder_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Config(format!("line {}: {key}: {e}", lineno + 1));
            match key {
                "preset" => cfg = Self::preset(value)?,
                "image_h" => cfg.image_h = parse_num(value).map_err(bad)?,
                "image_w" => cfg.image_w = parse_num(value).map_err(bad)?,
                "mr_hi" => cfg.mr_hi = parse_num(value).map_err(bad)?,
                "mr_lo" => cfg.mr_lo = parse_num(value).map_err(bad)?,
                "channels" => cfg.channels = parse_list(value).map_err(bad)?,
                "decoder_channels" => {
                    cfg.decoder_channels = parse_list(value).map_err(bad)?;
                    decoder_set = true;
                }
                "extra_levels" => cfg.extra_levels = parse_num(value).map_err(bad)?,
                "fusion" => cfg.fusion = value.parse()?,
                "scales" => cfg.scales = parse_num(value).map_err(bad)?,
                "loss_weights" => cfg.loss_weights = parse_list(value).map_err(bad)?,
                "lr" => cfg.lr = parse_num(value).map_err(bad)?,
                "seed" => cfg.seed = parse_num(value).map_err(bad)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        if !decoder_set && cfg.decoder_channels.len() != cfg.channels.len() + cfg.extra_levels {
            let mut dec: Vec<usize> = cfg.channels.iter().rev().copied().collect();
            let last = *dec.last().unwrap_or(&1);
            dec.extend(std::iter::repeat_n(last, cfg.extra_levels));
            cfg.decoder_channels = dec;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let weights = self
            .loss_weights
            .iter()
            .map(|w| format!("{w:?}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "image_h = {}\nimage_w = {}\nmr_hi = {}\nmr_lo = {}\nchannels = {}\n\
             decoder_channels = {}\nextra_levels = {}\nfusion = {}\nscales = {}\n\
             loss_weights = {}\nlr = {:?}\nseed = {}\n",
            self.image_h,
            self.image_w,
            self.mr_hi,
            self.mr_lo,
            join(&self.channels),
            join(&self.decoder_channels),
            self.extra_levels,
            self.fusion,
            self.scales,
            weights,
            self.lr,
            self.seed
        )
    }
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    s.trim().parse().map_err(|e: T::Err| e.to_string())
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(',').map(parse_num).collect()
}
