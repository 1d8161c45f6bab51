//! Model bundle: architecture config, vocabulary and the named weights for the
//! text table, image encoder, UNet and toy decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{
    build_conditioning, encode_image, encode_text, ConditioningSequence, ImageEncoderConfig, PoolRegion,
    Vocabulary, IP_TOKENS,
};
use crate::error::{Error, Result};
use crate::io::kv::KvMap;
use crate::tensor::Tensor;
use crate::unet::{UNetConfig, CONV_BLOCKS};
use crate::weights::ModelWeights;

/// Decoded images are `LATENT_FACTOR` times the latent resolution.
pub const LATENT_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub encoder: ImageEncoderConfig,
    pub max_text_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            encoder: ImageEncoderConfig::default(),
            max_text_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.encoder.d_model != self.unet.d_model {
            return Err(Error::UNetConfig("encoder and unet d_model differ".into()));
        }
        if self.encoder.input_size % 4 != 0 || self.max_text_len == 0 {
            return Err(Error::UNetConfig("encoder input must be a multiple of 4".into()));
        }
        Ok(())
    }

    /// Side length of decoded images.
    pub fn image_size(&self) -> (usize, usize) {
        (self.unet.spatial.0 * LATENT_FACTOR, self.unet.spatial.1 * LATENT_FACTOR)
    }

    pub fn to_kv(&self) -> KvMap {
        let u = &self.unet;
        let e = &self.encoder;
        let mut kv = KvMap::new();
        kv.set("latent_channels", u.latent_channels);
        kv.set("base_width", u.base_width);
        kv.set("spatial", format!("{}x{}", u.spatial.0, u.spatial.1));
        kv.set("attention_sites", u.attention_sites.join(","));
        kv.set("heads", u.heads);
        kv.set("head_dim", u.head_dim);
        kv.set("d_model", u.d_model);
        kv.set("temb_dim", u.temb_dim);
        kv.set("norm_groups", u.norm_groups);
        kv.set("encoder_input", e.input_size);
        kv.set("encoder_widths", format!("{},{}", e.widths[0], e.widths[1]));
        kv.set(
            "encoder_regions",
            e.regions.iter().map(|r| r.name()).collect::<Vec<_>>().join(","),
        );
        kv.set("max_text_len", self.max_text_len);
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let (h, w) = parse_pair(&kv.require("spatial")?, 'x')?;
        let widths = parse_pair(&kv.require("encoder_widths")?, ',')?;
        let regions: Vec<PoolRegion> = kv
            .require("encoder_regions")?
            .split(',')
            .map(|s| PoolRegion::parse(s.trim()).ok_or_else(|| Error::Malformed(format!("pool region `{s}`"))))
            .collect::<Result<_>>()?;
        let regions: [PoolRegion; IP_TOKENS] = regions
            .try_into()
            .map_err(|_| Error::Malformed("expected 4 pool regions".into()))?;
        let d_model = kv.parse("d_model")?;
        let cfg = ModelConfig {
            unet: UNetConfig {
                latent_channels: kv.parse("latent_channels")?,
                base_width: kv.parse("base_width")?,
                spatial: (h, w),
                attention_sites: kv
                    .require("attention_sites")?
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect(),
                heads: kv.parse("heads")?,
                head_dim: kv.parse("head_dim")?,
                d_model,
                temb_dim: kv.parse("temb_dim")?,
                norm_groups: kv.parse("norm_groups")?,
            },
            encoder: ImageEncoderConfig {
                input_size: kv.parse("encoder_input")?,
                widths: [widths.0, widths.1],
                d_model,
                regions,
            },
            max_text_len: kv.parse("max_text_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_pair(s: &str, sep: char) -> Result<(usize, usize)> {
    let mut it = s.split(sep).map(|p| p.trim().parse::<usize>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
        _ => Err(Error::Malformed(format!("expected a pair, got `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub weights: ModelWeights,
}

impl Model {
    /// Fresh training initialization. The output convolution starts at zero so
    /// the untrained model predicts zero noise.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let vocab = Vocabulary::bundled();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ModelWeights::new();
        let d = config.unet.d_model;
        weights.insert("text/embedding", normal(&[vocab.len(), d], 1.0, &mut rng)?);
        init_encoder(&config.encoder, &mut weights, &mut rng)?;
        for (name, t) in init_unet_weights(&config.unet, seed ^ 0x5eed_u64)?.iter() {
            weights.insert(name.clone(), t.clone());
        }
        weights.insert("decoder/weight", decoder_weight(config.unet.latent_channels)?);
        Ok(Model { config, vocab, weights })
    }

    /// Initialization with a random (nonzero) output convolution, for
    /// exercising the pipeline without training.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut model = Model::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let shape = model.weights.get("conv_out/weight")?.shape().to_vec();
        let fan_in = shape[1] * shape[2] * shape[3];
        model
            .weights
            .insert("conv_out/weight", normal(&shape, (1.0 / fan_in as f64).sqrt(), &mut rng)?);
        Ok(model)
    }

    pub fn text_tokens(&self, prompt: &str) -> Result<Tensor> {
        encode_text(
            prompt,
            &self.vocab,
            self.weights.get("text/embedding")?,
            self.config.max_text_len,
        )
    }

    /// IP tokens for a `[3, H, W]` reference (resized to the encoder input).
    pub fn image_tokens(&self, reference: &Tensor) -> Result<Tensor> {
        let s = self.config.encoder.input_size;
        let img = reference.resize_nearest((s, s))?;
        encode_image(&img, &self.weights, &self.config.encoder)
    }

    pub fn conditioning(&self, prompt: &str, reference: &Tensor) -> Result<ConditioningSequence> {
        build_conditioning(&self.text_tokens(prompt)?, &self.image_tokens(reference)?)
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Training(e.to_string()))?;
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

fn init_encoder(cfg: &ImageEncoderConfig, w: &mut ModelWeights, rng: &mut ChaCha8Rng) -> Result<()> {
    let [c1, c2] = cfg.widths;
    w.insert("image.conv1/weight", normal(&[c1, 3, 3, 3], (2.0 / 27.0f64).sqrt(), rng)?);
    w.insert("image.conv1/bias", Tensor::zeros(&[c1])?);
    w.insert("image.conv2/weight", normal(&[c2, c1, 3, 3], (2.0 / (9 * c1) as f64).sqrt(), rng)?);
    w.insert("image.conv2/bias", Tensor::zeros(&[c2])?);
    for j in 0..IP_TOKENS {
        w.insert(
            format!("image.proj{j}/weight"),
            normal(&[c2, cfg.d_model], (1.0 / c2 as f64).sqrt(), rng)?,
        );
        w.insert(format!("image.proj{j}/bias"), Tensor::zeros(&[cfg.d_model])?);
    }
    Ok(())
}

/// Random UNet weights (zero output convolution).
pub fn init_unet_weights(cfg: &UNetConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new();
    for (name, out, inp) in cfg.conv_shapes() {
        let shape = [out, inp, 3, 3];
        let t = if name == "conv_out" {
            Tensor::zeros(&shape)?
        } else {
            normal(&shape, (2.0 / (9 * inp) as f64).sqrt(), &mut rng)?
        };
        w.insert(format!("{name}/weight"), t);
        w.insert(format!("{name}/bias"), Tensor::zeros(&[out])?);
        if CONV_BLOCKS.contains(&name) {
            w.insert(
                format!("{name}/time_weight"),
                normal(&[cfg.temb_dim, out], (1.0 / cfg.temb_dim as f64).sqrt(), &mut rng)?,
            );
            w.insert(format!("{name}/time_bias"), Tensor::zeros(&[out])?);
        }
    }
    let inner = cfg.inner_dim();
    for site in cfg.sites() {
        let c = cfg.layer_channels(site)?;
        w.insert(format!("{site}/norm_gamma"), Tensor::ones(&[c])?);
        w.insert(format!("{site}/norm_beta"), Tensor::zeros(&[c])?);
        w.insert(format!("{site}/to_q"), normal(&[c, inner], (1.0 / c as f64).sqrt(), &mut rng)?);
        let kv_std = (1.0 / cfg.d_model as f64).sqrt();
        w.insert(format!("{site}/to_k"), normal(&[cfg.d_model, inner], kv_std, &mut rng)?);
        w.insert(format!("{site}/to_v"), normal(&[cfg.d_model, inner], kv_std, &mut rng)?);
        w.insert(format!("{site}/to_out"), normal(&[inner, c], (1.0 / inner as f64).sqrt(), &mut rng)?);
        w.insert(format!("{site}/out_bias"), Tensor::zeros(&[c])?);
    }
    Ok(w)
}

/// Analytic inverse of the fixed latent encoding: RGB channel `c` of each
/// 4x4 output block is `0.5 · latent[c]` (plus the fixed 0.5 bias).
pub fn decoder_weight(latent_channels: usize) -> Result<Tensor> {
    let k = LATENT_FACTOR;
    Tensor::from_fn(&[latent_channels, 3, k, k], |i| {
        let src = i / (3 * k * k);
        let dst = (i / (k * k)) % 3;
        if src == dst {
            0.5
        } else {
            0.0
        }
    })
}

/// Fixed training "encoder": 4x4 average pool mapped to [-1, 1]. Latent
/// channels are R, G, B and their mean.
pub fn encode_latent(image: &Tensor) -> Result<Tensor> {
    let k = LATENT_FACTOR;
    if image.rank() != 3 || image.dim(0) != 3 || image.dim(1) % k != 0 || image.dim(2) % k != 0 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected [3, H, W] with H, W multiples of 4".into(),
        });
    }
    let (h, w) = (image.dim(1) / k, image.dim(2) / k);
    let plane = image.dim(1) * image.dim(2);
    let src = image.data();
    let mut pooled = vec![0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        acc += src[c * plane + (y * k + a) * image.dim(2) + x * k + b] as f64;
                    }
                }
                pooled[(c * h + y) * w + x] = acc / (k * k) as f64;
            }
        }
    }
    let mut out = Vec::with_capacity(4 * h * w);
    out.extend(pooled.iter().map(|&v| (2.0 * v - 1.0) as f32));
    out.extend((0..h * w).map(|i| {
        let mean = (pooled[i] + pooled[h * w + i] + pooled[2 * h * w + i]) / 3.0;
        (2.0 * mean - 1.0) as f32
    }));
    Tensor::new(&[4, h, w], out)
}

/// Same names and shapes, all zeros.
pub fn zero_like(weights: &ModelWeights) -> Result<ModelWeights> {
    weights.map(|_, t| Tensor::zeros(t.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig::default();
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(&KvMap::parse_text(&kv.render()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn decoder_inverts_latent_encoding_on_block_constant_images() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| {
            let (c, y, x) = (i / 64, (i / 8) % 8, i % 8);
            [0.25, 0.5, 0.75, 1.0][(y / 4) * 2 + x / 4] * (c + 1) as f32 / 3.0
        })
        .unwrap();
        let lat = encode_latent(&img).unwrap();
        assert_eq!(lat.shape(), &[4, 2, 2]);
        let back = crate::pipeline::decode_latent(&lat, &decoder_weight(4).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let a = Model::init(ModelConfig::default(), 3).unwrap();
        let b = Model::init(ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.weights.get("conv_out/weight").unwrap().data().iter().all(|&v| v == 0.0));
        let r = Model::random(ModelConfig::default(), 3).unwrap();
        assert!(r.weights.get("conv_out/weight").unwrap().data().iter().any(|&v| v != 0.0));
        for site in crate::unet::SITE_SLOTS {
            assert!(a.weights.contains(&format!("{site}/to_k")));
        }
    }
}
