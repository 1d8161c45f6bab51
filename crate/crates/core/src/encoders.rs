//! Conditioning sequence construction: toy text embeddings plus a toy image
//! encoder that emits exactly four image-prompt (IP) tokens per reference.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{backward, Tensor};
use crate::weights::ModelWeights;

/// Number of image-prompt tokens appended after the text tokens.
pub const IP_TOKENS: usize = 4;
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

/// Colour and shape words used by the synthetic training corpus.
pub const CORPUS_WORDS: &[&str] = &[
    "red", "blue", "yellow", "orange", "purple", "white", "circle", "square", "triangle",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a word list. Ids are dense, `<pad>` = 0 and `<unk>` = 1 are
    /// reserved, duplicates keep their first id.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, UNK].into_iter().map(str::to_string) {
            vocab.push(w);
        }
        for w in words {
            vocab.push(w.as_ref().to_lowercase());
        }
        vocab
    }

    fn push(&mut self, word: String) {
        if !self.index.contains_key(&word) {
            self.index.insert(word.clone(), self.words.len());
            self.words.push(word);
        }
    }

    /// Words of the bundled prompt list plus the corpus colour/shape words.
    pub fn bundled() -> Self {
        let prompt_words: Vec<String> = crate::eval::bundled_prompts()
            .iter()
            .flat_map(|p| normalize(p).into_iter())
            .collect();
        Self::new(prompt_words.iter().map(String::as_str).chain(CORPUS_WORDS.iter().copied()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

fn normalize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercase, whitespace-split, map to ids, then truncate or pad to `max_len`.
pub fn tokenize(prompt: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    let words = normalize(prompt);
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut ids: Vec<usize> = words.iter().take(max_len).map(|w| vocab.id(w)).collect();
    ids.resize(max_len, PAD_ID);
    Ok(ids)
}

/// Gather embedding rows for `ids` from a `[V, d]` table.
pub fn embed_ids(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    let (v, d) = (table.dim(0), table.dim(1));
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::InvalidShape {
                shape: table.shape().to_vec(),
                reason: format!("token id {id} outside embedding table"),
            });
        }
        data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(&[ids.len(), d], data)
}

/// Text tokens `[max_len, d_model]` for a prompt.
pub fn encode_text(prompt: &str, vocab: &Vocabulary, table: &Tensor, max_len: usize) -> Result<Tensor> {
    embed_ids(&tokenize(prompt, vocab, max_len)?, table)
}

/// Spatial region of the encoder feature map that feeds one IP token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolRegion {
    /// Inner half of the feature map (where a centred subject sits).
    Center,
    /// Everything outside the inner half.
    Border,
    /// The whole map.
    Global,
}

impl PoolRegion {
    fn contains(self, y: usize, x: usize, size: usize) -> bool {
        let lo = size / 4;
        let hi = size - size / 4;
        let inner = (lo..hi).contains(&y) && (lo..hi).contains(&x);
        match self {
            PoolRegion::Center => inner,
            PoolRegion::Border => !inner,
            PoolRegion::Global => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolRegion::Center => "center",
            PoolRegion::Border => "border",
            PoolRegion::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "center" => Some(PoolRegion::Center),
            "border" => Some(PoolRegion::Border),
            "global" => Some(PoolRegion::Global),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderConfig {
    /// Square input resolution.
    pub input_size: usize,
    /// Output channels of the two stride-2 convolutions.
    pub widths: [usize; 2],
    pub d_model: usize,
    /// Pooling region per IP token.
    pub regions: [PoolRegion; IP_TOKENS],
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            widths: [16, 32],
            d_model: 64,
            regions: [
                PoolRegion::Center,
                PoolRegion::Border,
                PoolRegion::Border,
                PoolRegion::Global,
            ],
        }
    }
}

pub(crate) struct ImageEncoderCache {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    pooled: Vec<Tensor>,
}

/// Encode a `[3, H, W]` reference image into `[4, d_model]` IP tokens.
pub fn encode_image(img: &Tensor, weights: &ModelWeights, config: &ImageEncoderConfig) -> Result<Tensor> {
    Ok(encode_image_cached(img, weights, config)?.0)
}

pub(crate) fn encode_image_cached(
    img: &Tensor,
    weights: &ModelWeights,
    config: &ImageEncoderConfig,
) -> Result<(Tensor, ImageEncoderCache)> {
    let s = config.input_size;
    if img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != s || img.dim(2) != s {
        let (h, w) = if img.rank() == 3 { (img.dim(1), img.dim(2)) } else { (0, 0) };
        return Err(Error::ImageSize {
            got: (h, w),
            expected: (s, s),
        });
    }
    let pre1 = img.conv2d(
        weights.param("image.conv1", "weight")?,
        Some(weights.param("image.conv1", "bias")?),
        2,
        1,
    )?;
    let act1 = pre1.silu()?;
    let pre2 = act1.conv2d(
        weights.param("image.conv2", "weight")?,
        Some(weights.param("image.conv2", "bias")?),
        2,
        1,
    )?;
    let feat = pre2.silu()?;
    let (c, fh) = (feat.dim(0), feat.dim(1));

    let mut rows = Vec::with_capacity(IP_TOKENS * config.d_model);
    let mut pooled = Vec::with_capacity(IP_TOKENS);
    for (j, region) in config.regions.iter().enumerate() {
        let p = region_pool(&feat, *region, c, fh)?;
        let layer = format!("image.proj{j}");
        let tok = p.linear(weights.param(&layer, "weight")?, Some(weights.param(&layer, "bias")?))?;
        rows.extend_from_slice(tok.data());
        pooled.push(p);
    }
    let tokens = Tensor::new(&[IP_TOKENS, config.d_model], rows)?;
    Ok((
        tokens,
        ImageEncoderCache {
            input: img.clone(),
            pre1,
            act1,
            pre2,
            pooled,
        },
    ))
}

fn region_pool(feat: &Tensor, region: PoolRegion, c: usize, size: usize) -> Result<Tensor> {
    let cells: Vec<usize> = (0..size * size)
        .filter(|&i| region.contains(i / size, i % size, size))
        .collect();
    let n = cells.len() as f64;
    let data = (0..c)
        .map(|ch| {
            let plane = &feat.data()[ch * size * size..(ch + 1) * size * size];
            (cells.iter().map(|&i| plane[i] as f64).sum::<f64>() / n) as f32
        })
        .collect();
    Tensor::new(&[1, c], data)
}

pub(crate) fn encode_image_backward(
    cache: &ImageEncoderCache,
    d_tokens: &Tensor,
    weights: &ModelWeights,
    config: &ImageEncoderConfig,
    grads: &mut ModelWeights,
) -> Result<()> {
    let (c, fh) = (cache.pre2.dim(0), cache.pre2.dim(1));
    let d = config.d_model;
    let mut d_feat = vec![0f64; c * fh * fh];
    for (j, region) in config.regions.iter().enumerate() {
        let layer = format!("image.proj{j}");
        let w = weights.param(&layer, "weight")?;
        let dy = Tensor::new(&[1, d], d_tokens.data()[j * d..(j + 1) * d].to_vec())?;
        let (dp, dw, db) = backward::linear(&cache.pooled[j], w, &dy)?;
        grads.accumulate(&format!("{layer}/weight"), &dw)?;
        grads.accumulate(&format!("{layer}/bias"), &db)?;
        let cells: Vec<usize> = (0..fh * fh)
            .filter(|&i| region.contains(i / fh, i % fh, fh))
            .collect();
        let n = cells.len() as f64;
        for ch in 0..c {
            let g = dp.data()[ch] as f64 / n;
            for &i in &cells {
                d_feat[ch * fh * fh + i] += g;
            }
        }
    }
    let d_feat = Tensor::new(cache.pre2.shape(), d_feat.into_iter().map(|v| v as f32).collect())?;
    let d_pre2 = backward::silu(&cache.pre2, &d_feat)?;
    let (d_act1, dw2, db2) = backward::conv2d(&cache.act1, weights.param("image.conv2", "weight")?, 2, 1, &d_pre2)?;
    grads.accumulate("image.conv2/weight", &dw2)?;
    grads.accumulate("image.conv2/bias", &db2)?;
    let d_pre1 = backward::silu(&cache.pre1, &d_act1)?;
    let (_, dw1, db1) = backward::conv2d(&cache.input, weights.param("image.conv1", "weight")?, 2, 1, &d_pre1)?;
    grads.accumulate("image.conv1/weight", &dw1)?;
    grads.accumulate("image.conv1/bias", &db1)?;
    Ok(())
}

/// Text tokens followed by the four IP tokens, with the span of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSequence {
    tokens: Tensor,
    text_span: Range<usize>,
    ip_span: Range<usize>,
}

/// Concatenate text rows and IP rows (text first).
pub fn build_conditioning(text: &Tensor, ip: &Tensor) -> Result<ConditioningSequence> {
    if text.rank() != 2 || ip.rank() != 2 || text.dim(1) != ip.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "build_conditioning",
            left: text.shape().to_vec(),
            right: ip.shape().to_vec(),
        });
    }
    if ip.dim(0) != IP_TOKENS {
        return Err(Error::InvalidShape {
            shape: ip.shape().to_vec(),
            reason: format!("expected exactly {IP_TOKENS} IP tokens"),
        });
    }
    let n_text = text.dim(0);
    let mut data = text.data().to_vec();
    data.extend_from_slice(ip.data());
    Ok(ConditioningSequence {
        tokens: Tensor::new(&[n_text + IP_TOKENS, text.dim(1)], data)?,
        text_span: 0..n_text,
        ip_span: n_text..n_text + IP_TOKENS,
    })
}

impl ConditioningSequence {
    /// Sequence with no IP rows at all. Only used as a reference point for
    /// ablations (e.g. checking that a zero IP scale is text-only attention).
    pub fn text_only(text: &Tensor) -> Result<ConditioningSequence> {
        if text.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: text.shape().to_vec(),
                reason: "text tokens must be [n, d]".into(),
            });
        }
        let n = text.dim(0);
        Ok(ConditioningSequence {
            tokens: text.clone(),
            text_span: 0..n,
            ip_span: n..n,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.tokens.dim(1)
    }

    pub fn text_span(&self) -> Range<usize> {
        self.text_span.clone()
    }

    pub fn ip_span(&self) -> Range<usize> {
        self.ip_span.clone()
    }

    fn rows(&self, span: Range<usize>) -> Result<Tensor> {
        let d = self.d_model();
        Tensor::new(&[span.len(), d], self.tokens.data()[span.start * d..span.end * d].to_vec())
    }

    pub fn text_rows(&self) -> Result<Tensor> {
        self.rows(self.text_span())
    }

    pub fn ip_rows(&self) -> Result<Tensor> {
        self.rows(self.ip_span())
    }
}
