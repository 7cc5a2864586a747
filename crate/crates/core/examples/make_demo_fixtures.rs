//! Writes the bundled demo topics: `cargo run -p qzlora-core --example make_demo_fixtures -- <out_dir>`.
//!
//! Each image is a 256x256 tinted checkerboard whose mean channel intensity
//! is the image's hidden quality, which the mock VLM keys on.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

struct DemoTopic {
    id: &'static str,
    cell: u32,
    /// Quality levels in listing order.
    levels: [f64; 10],
    captions: [&'static str; 10],
    extras: &'static [&'static str],
}

fn checkerboard(quality: f64, cell: u32, spread: i32, tint: i32) -> Vec<u8> {
    let v = (quality * 255.0).round() as i32;
    let img = RgbImage::from_fn(256, 256, |x, y| {
        let on = ((x / cell) + (y / cell)) % 2 == 0;
        let base = if on { v + spread } else { v - spread };
        let px = |d: i32| (base + d).clamp(0, 255) as u8;
        Rgb([px(tint), px(0), px(-tint)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

fn tiny_png() -> Vec<u8> {
    let img = RgbImage::from_pixel(16, 16, Rgb([200, 200, 200]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

// 1x1 GIF89a
const GIF: &[u8] = &[
    0x47, 0x49, 0x46, 0x38, 0x39, 0x61, 0x01, 0x00, 0x01, 0x00, 0x80, 0x00, 0x00, 0x00, 0x00, 0x00, 0xff, 0xff,
    0xff, 0x21, 0xf9, 0x04, 0x01, 0x00, 0x00, 0x00, 0x00, 0x2c, 0x00, 0x00, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00,
    0x00, 0x02, 0x02, 0x44, 0x01, 0x00, 0x3b,
];

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixtures/demo/images".into());
    let topics = [
        DemoTopic {
            id: "amber-lantern",
            cell: 8,
            levels: [0.42, 0.18, 0.77, 0.55, 0.30, 0.86, 0.24, 0.63, 0.49, 0.71],
            captions: [
                "Amber lantern on a wooden table",
                "Blurry lantern photographed at night",
                "Amber paper lantern with brass frame, side view",
                "",
                "Lantern festival crowd",
                "Close-up of the amber glass panels and brass handle",
                "Scan of an old catalogue page",
                "Amber lantern hanging from a hook",
                "Two lanterns on a shelf",
                "Amber lantern glowing in a garden",
            ],
            extras: &[],
        },
        DemoTopic {
            id: "stone-gate",
            cell: 16,
            levels: [0.81, 0.35, 0.60, 0.22, 0.74, 0.47, 0.90, 0.28, 0.66, 0.53],
            captions: [
                "Front view of the stone gate with carved lintel",
                "Gate seen through trees",
                "Stone gate at dawn",
                "Map of the old town",
                "Carved pillars of the gate",
                "Tourists in front of the gate",
                "Restored stone gate, full elevation",
                "Detail of a weathered block",
                "Gate arch from below",
                "",
            ],
            extras: &["tiny.png"],
        },
        DemoTopic {
            id: "reed-finch",
            cell: 4,
            levels: [0.26, 0.58, 0.39, 0.83, 0.20, 0.69, 0.45, 0.76, 0.33, 0.62],
            captions: [
                "Reed finch perched on a reed stem",
                "Flock of small birds in flight",
                "Reed finch, male, breeding plumage",
                "Nest in a reed bed",
                "Museum skin of a finch",
                "Reed finch singing, side profile",
                "Reed bed landscape",
                "Reed finch with streaked brown back and conical bill",
                "Juvenile bird on the ground",
                "Reed finch feeding on seeds",
            ],
            extras: &["tiny.png", "anim.gif"],
        },
    ];
    for (t_index, t) in topics.iter().enumerate() {
        let dir = Path::new(&out).join(t.id);
        fs::create_dir_all(&dir).unwrap();
        let mut listing = Vec::new();
        for (i, (&q, caption)) in t.levels.iter().zip(t.captions).enumerate() {
            let name = format!("{:02}.png", i + 1);
            let bytes = checkerboard(q, t.cell, 6 + i as i32, 3 + t_index as i32);
            fs::write(dir.join(&name), bytes).unwrap();
            listing.push(serde_json::json!({"file": name, "description": caption}));
            // the unusable files sit in the middle of the listing
            if i == 4 {
                for extra in t.extras {
                    let bytes = if extra.ends_with(".gif") { GIF.to_vec() } else { tiny_png() };
                    fs::write(dir.join(extra), bytes).unwrap();
                    listing.push(serde_json::json!({"file": extra, "description": "unusable file"}));
                }
            }
        }
        let mut text = serde_json::to_string_pretty(&listing).unwrap();
        text.push('\n');
        fs::write(dir.join("listing.json"), text).unwrap();
    }
}
