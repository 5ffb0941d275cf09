//! Request and response bodies for the three model services.
//!
//! Field order in the request structs is the serialized order on the wire.

use serde::{Deserialize, Serialize};

use crate::prompts::Style;

pub const TXT2IMG_PATH: &str = "/v1/txt2img";
pub const DETECT_PATH: &str = "/v1/detect";
pub const QUERY_PATH: &str = "/v1/query";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Txt2ImgRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub style: Style,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Txt2ImgResponse {
    pub image_png_base64: String,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_png_base64: String,
    pub vocabulary: Vec<String>,
    pub confidence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

impl Detection {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!(
                "detection '{}' has confidence {} outside [0,1]",
                self.label, self.confidence
            ));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(format!("detection '{}' has a degenerate bbox", self.label));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub image_png_base64: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn txt2img_body_is_bit_exact() {
        let req = Txt2ImgRequest {
            prompt: "a picture of dog and frisbee".into(),
            negative_prompt: "blurry".into(),
            style: Style::Photo,
            seed: u64::MAX,
            width: 512,
            height: 512,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"prompt":"a picture of dog and frisbee","negative_prompt":"blurry","style":"photo","seed":18446744073709551615,"width":512,"height":512}"#
        );
    }

    #[test]
    fn detect_and_query_bodies() {
        let req = DetectRequest {
            image_png_base64: "AAAA".into(),
            vocabulary: vec!["dog".into()],
            confidence_threshold: 0.5,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"image_png_base64":"AAAA","vocabulary":["dog"],"confidence_threshold":0.5}"#
        );
        let req = QueryRequest {
            image_png_base64: "AAAA".into(),
            prompt: "Please describe this image.".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"image_png_base64":"AAAA","prompt":"Please describe this image."}"#
        );
    }

    #[test]
    fn responses_tolerate_extra_fields() {
        let r: Txt2ImgResponse = serde_json::from_str(
            r#"{"image_png_base64":"AA","backend_id":"sd15","nondeterministic_backend":true}"#,
        )
        .unwrap();
        assert_eq!(r.backend_id, "sd15");
    }

    #[test]
    fn detection_validation() {
        let ok = Detection { label: "dog".into(), confidence: 0.9, bbox: [0.0, 0.0, 4.0, 4.0] };
        assert!(ok.validate().is_ok());
        let bad = Detection { confidence: 1.5, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = Detection { bbox: [4.0, 0.0, 4.0, 4.0], ..ok };
        assert!(bad.validate().is_err());
    }
}
