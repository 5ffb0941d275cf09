//! PNG validation, text-chunk metadata and JPEG→PNG conversion.

use std::io::Cursor;

/// tEXt keyword under which mock images carry their concept labels.
pub const LABELS_KEY: &str = "ode:labels";
/// tEXt keyword under which mock images carry the generating prompt.
pub const PROMPT_KEY: &str = "ode:prompt";

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

pub fn looks_like_png(bytes: &[u8]) -> bool {
    bytes.starts_with(&PNG_SIGNATURE)
}

pub fn looks_like_jpeg(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0xff, 0xd8, 0xff])
}

/// Fully decodes the first frame; returns (width, height).
pub fn validate_png(bytes: &[u8]) -> Result<(u32, u32), String> {
    if !looks_like_png(bytes) {
        return Err("missing PNG signature".into());
    }
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| "image too large".to_string())?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    reader.finish().map_err(|e| e.to_string())?;
    Ok((info.width, info.height))
}

/// All tEXt chunks as (keyword, text).
pub fn png_text_chunks(bytes: &[u8]) -> Result<Vec<(String, String)>, String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().map_err(|e| e.to_string())?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|c| (c.keyword.clone(), c.text.clone()))
        .collect())
}

pub fn png_text(bytes: &[u8], key: &str) -> Option<String> {
    png_text_chunks(bytes)
        .ok()?
        .into_iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
}

/// Labels embedded by [`encode_labeled_png`], if any.
pub fn embedded_labels(bytes: &[u8]) -> Option<Vec<String>> {
    png_text(bytes, LABELS_KEY).map(|s| {
        s.split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect()
    })
}

/// Encodes an RGB PNG filled with a colour derived from `fill_seed`, with
/// the given labels (and optional prompt) in tEXt chunks.
pub fn encode_labeled_png(
    width: u32,
    height: u32,
    labels: &[String],
    prompt: Option<&str>,
    fill_seed: u64,
) -> Vec<u8> {
    let rgb = fill_seed.to_be_bytes();
    let mut pixels = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        for x in 0..width {
            // a two-tone checker so the image is not a flat fill
            let shade = if ((x / 8) + (y / 8)) % 2 == 0 { 5 } else { 2 };
            pixels.extend_from_slice(&rgb[shade..shade + 3]);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(LABELS_KEY.into(), labels.join(","))
            .expect("latin-1 keyword");
        if let Some(p) = prompt {
            enc.add_text_chunk(PROMPT_KEY.into(), p.to_owned())
                .expect("latin-1 keyword");
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(&pixels).expect("in-memory PNG data");
        writer.finish().expect("in-memory PNG finish");
    }
    out
}

/// Re-encodes any supported raster (PNG or JPEG) as PNG. PNG input is
/// returned unchanged so embedded metadata survives.
pub fn to_png(bytes: &[u8]) -> Result<Vec<u8>, String> {
    if looks_like_png(bytes) {
        validate_png(bytes)?;
        return Ok(bytes.to_vec());
    }
    if !looks_like_jpeg(bytes) {
        return Err("unsupported image format (expected PNG or JPEG)".into());
    }
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Jpeg)
        .map_err(|e| e.to_string())?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}
