//! Segment and correct requests as pure functions over a loaded model.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use iwnet_core::field::{attraction_map, FieldParams, PointPair};
use iwnet_core::interact::validate_user_points;
use iwnet_core::metrics::{asd, iou};
use iwnet_core::net::{encode_checkpoint, WNetParams};
use iwnet_core::volgrid::{
    decode_payload, encode_iwv1, rescale_index, resample_iso, threshold, BinaryMask, Iwv1Header, ScalarVolume,
    SoftMask, Volume, VolumeGeometry, VolumeKind,
};
use iwnet_core::Error;

/// Request bodies above this size are refused.
pub const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq, thiserror::Error, Serialize)]
#[error("{code}: {message}")]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(400, "malformed_body", message)
    }

    pub fn too_large(len: usize) -> Self {
        Self::new(413, "payload_too_large", format!("{len} bytes exceeds the {MAX_BODY_BYTES}-byte limit"))
    }

    pub fn body(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("error serializes")
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Header(_) | Error::Version(_) | Error::Json(_) => (400, "malformed_body"),
            Error::Geometry(_) | Error::Shape(_) | Error::PayloadLength { .. } => (422, "invalid_geometry"),
            Error::Payload(_) => (422, "invalid_payload"),
            Error::NonFinite | Error::InvalidArgument(_) => (422, "invalid_points"),
            Error::EmptyMask | Error::EmptyUnion => (422, "empty_mask"),
            Error::CoincidentPoints => (409, "coincident_points"),
            _ => (500, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub header: Iwv1Header,
    pub data_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectRequest {
    pub header: Iwv1Header,
    pub data_b64: String,
    /// Soft mask on the volume's grid, raw IWV1 payload.
    pub prior_b64: String,
    /// Two `[z, y, x]` points in the volume's own voxel space.
    pub points: [[f64; 3]; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_b64: Option<String>,
}

/// Output masks on the request grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub model_version: String,
    pub soft_header: Iwv1Header,
    pub soft_b64: String,
    pub mask_header: Iwv1Header,
    pub mask_b64: String,
    /// Model-grid voxels per request voxel along each axis.
    pub scale_factor: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionMetrics {
    pub iou_initial: f64,
    pub iou_corrected: f64,
    pub asd_initial_mm: Option<f64>,
    pub asd_corrected_mm: Option<f64>,
    /// Keep-or-replace choice: true when the correction has the higher IoU.
    pub keep_corrected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectResponse {
    #[serde(flatten)]
    pub masks: MaskResponse,
    /// The clamped points mapped onto the model grid.
    pub points_model: [[f64; 3]; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CorrectionMetrics>,
}

/// Read-only model state shared by all requests.
#[derive(Clone, Debug)]
pub struct ServiceState {
    params: WNetParams<f32>,
    decay_p: f64,
    model_version: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl ServiceState {
    pub fn new(params: WNetParams<f32>, decay_p: f64) -> iwnet_core::Result<Self> {
        params.config.validate()?;
        if !params.all_finite() {
            return Err(Error::Payload("model parameters are not finite".into()));
        }
        if !(0.0..=1.0).contains(&decay_p) {
            return Err(Error::InvalidArgument(format!("decay_p {decay_p}")));
        }
        let (manifest, blob) = encode_checkpoint(&params);
        let model_version = format!(
            "iwnet-{}-{:016x}",
            params.config.input_side,
            fnv1a(manifest.as_bytes()) ^ fnv1a(&blob)
        );
        Ok(Self {
            params,
            decay_p,
            model_version,
        })
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn params(&self) -> &WNetParams<f32> {
        &self.params
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            status: "ok".into(),
            model_version: self.model_version.clone(),
        }
    }

    fn model_dims(&self) -> [usize; 3] {
        [self.params.config.input_side; 3]
    }

    fn to_model(&self, v: &Grid32) -> ApiResult<Grid32> {
        if v.dims() == self.model_dims() {
            Ok(v.clone())
        } else {
            Ok(resample_iso(v, self.model_dims())?)
        }
    }

    fn to_request(&self, soft: &SoftMask, geometry: &VolumeGeometry) -> ApiResult<MaskResponse> {
        let mut soft = if soft.dims() == geometry.dims {
            soft.clone()
        } else {
            resample_iso(soft, geometry.dims)?
        };
        soft.geometry = geometry.clone();
        for v in &mut soft.values {
            *v = v.clamp(0.0, 1.0);
        }
        let mask = threshold(&soft, 0.5);
        let (_, soft_raw) = encode_iwv1(&Volume::Soft(soft));
        let (_, mask_raw) = encode_iwv1(&Volume::Mask(mask));
        let side = self.params.config.input_side as f64;
        Ok(MaskResponse {
            model_version: self.model_version.clone(),
            soft_header: Iwv1Header::new(VolumeKind::Soft, geometry),
            soft_b64: B64.encode(soft_raw),
            mask_header: Iwv1Header::new(VolumeKind::Mask, geometry),
            mask_b64: B64.encode(mask_raw),
            scale_factor: geometry.dims.map(|d| side / d as f64),
        })
    }

    fn initial(&self, image: &ScalarVolume) -> ApiResult<SoftMask> {
        Ok(self.params.segment(&self.to_model(image)?)?)
    }

    pub fn segment(&self, req: &SegmentRequest) -> ApiResult<MaskResponse> {
        let image = decode_image(&req.header, &req.data_b64)?;
        let soft = self.initial(&image)?;
        self.to_request(&soft, &image.geometry)
    }

    pub fn correct(&self, req: &CorrectRequest) -> ApiResult<CorrectResponse> {
        let image = decode_image(&req.header, &req.data_b64)?;
        let geometry = image.geometry.clone();
        let prior = decode_as(&Iwv1Header::new(VolumeKind::Soft, &geometry), &req.prior_b64, "prior_b64")?
            .into_soft()?;
        let truth = req
            .ground_truth_b64
            .as_deref()
            .map(|b| decode_as(&Iwv1Header::new(VolumeKind::Mask, &geometry), b, "ground_truth_b64")?.into_mask().map_err(ApiError::from))
            .transpose()?;
        let pair = validate_user_points(req.points[0], req.points[1], &geometry)?;

        let from = geometry.dims;
        let to = self.model_dims();
        let model_pair = PointPair {
            p0: rescale_index(pair.p0, from, to),
            p1: rescale_index(pair.p1, from, to),
        };
        let model_image = self.to_model(&image)?;
        let model_prior = self.to_model(&prior)?;
        let map = attraction_map(Some(&model_pair), &FieldParams::new(self.decay_p), &model_image.geometry)?;
        let corrected = self.params.correct(&model_image, &model_prior, &map)?;
        let masks = self.to_request(&corrected, &geometry)?;

        let metrics = match truth {
            None => None,
            Some(truth) => {
                let initial = threshold(&prior, 0.5);
                let corrected = decode_mask(&masks.mask_header, &masks.mask_b64)?;
                Some(correction_metrics(&initial, &corrected, &truth)?)
            }
        };
        Ok(CorrectResponse {
            masks,
            points_model: [model_pair.p0, model_pair.p1],
            metrics,
        })
    }

    /// Route a raw request body; every outcome is a status and a JSON body.
    pub fn handle(&self, route: Route, body: &[u8]) -> (u16, Vec<u8>) {
        let out = match route {
            Route::Health => Ok(serde_json::to_vec(&self.health()).expect("serializes")),
            Route::Segment => parse::<SegmentRequest>(body)
                .and_then(|r| self.segment(&r))
                .map(|r| serde_json::to_vec(&r).expect("serializes")),
            Route::Correct => parse::<CorrectRequest>(body)
                .and_then(|r| self.correct(&r))
                .map(|r| serde_json::to_vec(&r).expect("serializes")),
        };
        match out {
            Ok(body) => (200, body),
            Err(e) => (e.status, e.body()),
        }
    }
}

type Grid32 = iwnet_core::volgrid::Grid<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Health,
    Segment,
    Correct,
}

/// Parse a JSON request body with the size cap applied.
pub fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    if body.len() > MAX_BODY_BYTES {
        return Err(ApiError::too_large(body.len()));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

fn decode_as(header: &Iwv1Header, data_b64: &str, field: &str) -> ApiResult<Volume> {
    header.validate()?;
    let expected = header.payload_len()?;
    if expected > MAX_BODY_BYTES {
        return Err(ApiError::too_large(expected));
    }
    let raw = B64
        .decode(data_b64)
        .map_err(|e| ApiError::malformed(format!("{field}: {e}")))?;
    Ok(decode_payload(header, &raw)?)
}

/// The request volume: a finite scalar IWV1 payload.
pub fn decode_image(header: &Iwv1Header, data_b64: &str) -> ApiResult<ScalarVolume> {
    if header.kind != VolumeKind::Scalar {
        return Err(ApiError::new(422, "invalid_payload", format!("volume kind {:?}, expected scalar", header.kind)));
    }
    let v = decode_as(header, data_b64, "data_b64")?.into_scalar()?;
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Payload("volume has non-finite values".into()).into());
    }
    Ok(v)
}

pub fn decode_mask(header: &Iwv1Header, data_b64: &str) -> ApiResult<BinaryMask> {
    Ok(decode_as(header, data_b64, "mask_b64")?.into_mask()?)
}

pub fn decode_soft(header: &Iwv1Header, data_b64: &str) -> ApiResult<SoftMask> {
    Ok(decode_as(header, data_b64, "soft_b64")?.into_soft()?)
}

fn asd_or_none(pred: &BinaryMask, truth: &BinaryMask) -> ApiResult<Option<f64>> {
    if pred.is_blank() {
        return Ok(None);
    }
    Ok(Some(asd(pred, truth)?))
}

pub fn correction_metrics(initial: &BinaryMask, corrected: &BinaryMask, truth: &BinaryMask) -> ApiResult<CorrectionMetrics> {
    if truth.is_blank() {
        return Err(Error::EmptyMask.into());
    }
    let iou_initial = iou(initial, truth)?;
    let iou_corrected = iou(corrected, truth)?;
    Ok(CorrectionMetrics {
        iou_initial,
        iou_corrected,
        asd_initial_mm: asd_or_none(initial, truth)?,
        asd_corrected_mm: asd_or_none(corrected, truth)?,
        keep_corrected: iou_corrected > iou_initial,
    })
}

/// Request body pieces for a volume, for clients and tests.
pub fn encode_volume(v: &Volume) -> (Iwv1Header, String) {
    let (_, raw) = encode_iwv1(v);
    (Iwv1Header::new(v.kind(), v.geometry()), B64.encode(raw))
}
