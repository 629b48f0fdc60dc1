//! SVG overlays of matched patches against the ground-truth box.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{patch_to_box, BBox, GridSpec, PatchIndex};
use crate::matching::KSemantics;

pub const GT_COLOR: &str = "red";
pub const PATCH_COLORS: [&str; 3] = ["blue", "green", "yellow"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedPatch {
    pub rank: usize,
    pub patch: PatchIndex,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub color: String,
}

/// JSON sidecar written next to an overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub qa_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub k: usize,
    pub k_semantics: KSemantics,
    pub gt_box: Option<BBox>,
    pub patches: Vec<ExplainedPatch>,
}

impl Explanation {
    pub fn new(
        qa_id: impl Into<String>,
        grid: &GridSpec,
        gt: Option<BBox>,
        ranked: &[PatchIndex],
        k: usize,
        semantics: KSemantics,
    ) -> Result<Self> {
        let patches = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(rank, p)| {
                Ok(ExplainedPatch {
                    rank,
                    patch: *p,
                    bbox: patch_to_box(grid, *p)?,
                    color: PATCH_COLORS[rank % PATCH_COLORS.len()].to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Explanation {
            qa_id: qa_id.into(),
            image_width: grid.image_width(),
            image_height: grid.image_height(),
            k,
            k_semantics: semantics,
            gt_box: gt,
            patches,
        })
    }

    /// The overlay: the ground-truth box first, then patches in rank order.
    pub fn to_svg(&self) -> String {
        let (w, h) = (self.image_width, self.image_height);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, "  <title>{}</title>", escape(&self.qa_id));
        if let Some(gt) = &self.gt_box {
            rect(&mut out, gt, GT_COLOR, 3, "gt");
        }
        for p in &self.patches {
            rect(
                &mut out,
                &p.bbox,
                &p.color,
                2,
                &format!("patch-{}", p.patch.get()),
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

fn rect(out: &mut String, b: &BBox, color: &str, width: u32, id: &str) {
    let _ = writeln!(
        out,
        r#"  <rect id="{id}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
        b.x_min(),
        b.y_min(),
        b.width(),
        b.height()
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
