//! The multimodal model contract and its two implementations: a scripted
//! mock for offline runs and an HTTP client for chat-style endpoints.

mod mock;
mod remote;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::render::PromptedImage;

pub use mock::{MockBackend, ScriptRule, ScriptedBehavior};
pub use remote::{RemoteBackend, RemoteConfig};

/// An image passed to the model, PNG or JPEG encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestImage {
    Prompted(PromptedImage),
    Raw {
        source_image_id: String,
        bytes: Vec<u8>,
    },
}

impl RequestImage {
    pub fn bytes(&self) -> &[u8] {
        match self {
            RequestImage::Prompted(p) => &p.image_bytes,
            RequestImage::Raw { bytes, .. } => bytes,
        }
    }

    /// Lowercase hex SHA-256 of the encoded bytes.
    pub fn fingerprint(&self) -> String {
        fingerprint(self.bytes())
    }

    pub fn mime_type(&self) -> &'static str {
        match image::guess_format(self.bytes()) {
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            _ => "image/png",
        }
    }

    /// Pixel dimensions read from the encoded header.
    pub fn dimensions(&self) -> Result<(u32, u32)> {
        image::ImageReader::new(std::io::Cursor::new(self.bytes()))
            .with_guessed_format()
            .map_err(|e| Error::Image(e.to_string()))?
            .into_dimensions()
            .map_err(|e| Error::Image(e.to_string()))
    }
}

pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoding is greedy: temperature is fixed at zero and not configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_output_tokens: u32,
}

impl DecodeParams {
    pub const TEMPERATURE: f64 = 0.0;

    pub fn temperature(&self) -> f64 {
        Self::TEMPERATURE
    }
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_output_tokens: 512,
        }
    }
}

/// Arguments of one model call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRequest {
    images: Vec<RequestImage>,
    instruction: String,
    decode: DecodeParams,
}

impl ModelRequest {
    pub fn new(
        images: Vec<RequestImage>,
        instruction: impl Into<String>,
        decode: DecodeParams,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Parameter(
                "a model request needs at least one image".into(),
            ));
        }
        if decode.max_output_tokens == 0 {
            return Err(Error::Parameter(
                "max_output_tokens must be positive".into(),
            ));
        }
        Ok(Self {
            images,
            instruction: instruction.into(),
            decode,
        })
    }

    pub fn images(&self) -> &[RequestImage] {
        &self.images
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn decode(&self) -> DecodeParams {
        self.decode
    }

    /// Compact, image-free description for traces.
    pub fn summary(&self) -> RequestSummary {
        RequestSummary {
            instruction: self.instruction.clone(),
            image_fingerprints: self.images.iter().map(RequestImage::fingerprint).collect(),
            temperature: self.decode.temperature(),
            max_output_tokens: self.decode.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub instruction: String,
    pub image_fingerprints: Vec<String>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub prompt_token_count: u64,
    pub output_token_count: u64,
    pub image_token_count: u64,
    /// True when any count was estimated rather than reported by the endpoint.
    pub estimated: bool,
}

/// A multimodal model: images plus an instruction in, text out.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse> {
        (**self).invoke(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse> {
        (**self).invoke(request)
    }
}

/// Token estimates for endpoints that do not report usage.
///
/// Text costs `ceil(bytes / 4)` tokens. Images are cut into square tiles of
/// `tile_size` pixels (at most `max_tiles`), each costing `tokens_per_tile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenTable {
    pub tile_size: u32,
    pub tokens_per_tile: u32,
    pub max_tiles: u32,
}

impl Default for TokenTable {
    fn default() -> Self {
        Self {
            tile_size: 448,
            tokens_per_tile: 256,
            max_tiles: 12,
        }
    }
}

impl TokenTable {
    pub fn text_tokens(text: &str) -> u64 {
        (text.len() as u64).div_ceil(4)
    }

    pub fn image_tokens(&self, width: u32, height: u32) -> u64 {
        let tile = self.tile_size.max(1);
        let tiles = (width.div_ceil(tile) as u64) * (height.div_ceil(tile) as u64);
        tiles.clamp(1, self.max_tiles.max(1) as u64) * self.tokens_per_tile as u64
    }

    pub fn request_image_tokens(&self, request: &ModelRequest) -> Result<u64> {
        request
            .images()
            .iter()
            .map(|img| img.dimensions().map(|(w, h)| self.image_tokens(w, h)))
            .sum()
    }
}

/// Hands out call indices, strictly increasing within one pipeline run.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }

    pub fn issued(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}
