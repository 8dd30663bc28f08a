//! Scene and split files.
//!
//! Scene files are JSON with a fixed field order and every float printed with
//! nine significant digits. Generated coordinates are quantized to that
//! precision up front, so `load(save(s)) == s` holds exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::generate::Benchmark;
use super::shapes::CategorySpec;
use super::{Box3D, DatasetSplit, PointCloudScene, Vec3, BACKGROUND};
use crate::error::{Error, Result};

/// Shortest plain decimal with nine significant digits (exponent form outside
/// `1e-6 ..= 1e15`).
pub fn format_sig9(v: f64) -> String {
    assert!(v.is_finite(), "cannot serialize non-finite value {v}");
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::new();
    if negative {
        out.push('-');
    }
    if !(-6..=15).contains(&exp) {
        let mut m = format!("{}.{}", &digits[..1], &digits[1..]);
        trim_fraction(&mut m);
        let _ = write!(out, "{m}e{exp}");
        return out;
    }
    let mut body = if exp >= 0 {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            let mut s = digits.clone();
            s.extend(std::iter::repeat_n('0', int_len - digits.len()));
            s
        } else {
            format!("{}.{}", &digits[..int_len], &digits[int_len..])
        }
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    trim_fraction(&mut body);
    out.push_str(&body);
    out
}

fn trim_fraction(s: &mut String) {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
}

/// Round to the nearest value representable by [`format_sig9`].
pub fn quantize(v: f64) -> f64 {
    format_sig9(v).parse().expect("own format parses")
}

fn vec3(v: &Vec3) -> String {
    format!(
        "[{},{},{}]",
        format_sig9(v[0]),
        format_sig9(v[1]),
        format_sig9(v[2])
    )
}

pub fn scene_to_string(scene: &PointCloudScene) -> String {
    let mut s = String::with_capacity(scene.points.len() * 40);
    s.push_str("{\n");
    let _ = writeln!(
        s,
        "  \"scene_id\": {},",
        serde_json::to_string(&scene.scene_id).expect("string")
    );
    s.push_str("  \"points\": [\n");
    for (i, p) in scene.points.iter().enumerate() {
        let sep = if i + 1 == scene.points.len() { "" } else { "," };
        let _ = writeln!(s, "    {}{sep}", vec3(p));
    }
    s.push_str("  ],\n");
    s.push_str("  \"point_instance\": [");
    for (i, t) in scene.point_instance.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{t}");
    }
    s.push_str("],\n");
    s.push_str("  \"boxes\": [\n");
    for (i, b) in scene.boxes.iter().enumerate() {
        let sep = if i + 1 == scene.boxes.len() { "" } else { "," };
        let _ = writeln!(
            s,
            "    {{\"center\":{},\"size\":{},\"heading\":{},\"class_id\":{},\"instance_id\":{}}}{sep}",
            vec3(&b.center),
            vec3(&b.size),
            format_sig9(b.heading),
            b.class_id,
            b.instance_id
        );
    }
    s.push_str("  ]\n}\n");
    s
}

pub fn save_scene(scene: &PointCloudScene, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, scene_to_string(scene)).map_err(|e| Error::io(path, e))
}

struct Fields<'a> {
    path: &'a str,
}

impl Fields<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::parse(self.path, field, msg)
    }

    fn get<'v>(&self, obj: &'v Value, key: &str, field: &str) -> Result<&'v Value> {
        obj.get(key).ok_or_else(|| self.err(field, "missing"))
    }

    fn f64(&self, v: &Value, field: &str) -> Result<f64> {
        v.as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| self.err(field, "expected a finite number"))
    }

    fn usize(&self, v: &Value, field: &str) -> Result<usize> {
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| self.err(field, "expected a non-negative integer"))
    }

    fn array<'v>(&self, v: &'v Value, field: &str) -> Result<&'v Vec<Value>> {
        v.as_array()
            .ok_or_else(|| self.err(field, "expected an array"))
    }

    fn vec3(&self, v: &Value, field: &str) -> Result<Vec3> {
        let a = self.array(v, field)?;
        if a.len() != 3 {
            return Err(self.err(field, format!("expected 3 components, found {}", a.len())));
        }
        Ok([
            self.f64(&a[0], field)?,
            self.f64(&a[1], field)?,
            self.f64(&a[2], field)?,
        ])
    }
}

pub fn parse_scene(text: &str, path: &str) -> Result<PointCloudScene> {
    let f = Fields { path };
    let doc: Value = serde_json::from_str(text).map_err(|e| f.err("<document>", e.to_string()))?;
    if !doc.is_object() {
        return Err(f.err("<document>", "expected an object"));
    }
    let scene_id = f
        .get(&doc, "scene_id", "scene_id")?
        .as_str()
        .ok_or_else(|| f.err("scene_id", "expected a string"))?
        .to_string();
    let points = f
        .array(f.get(&doc, "points", "points")?, "points")?
        .iter()
        .enumerate()
        .map(|(i, p)| f.vec3(p, &format!("points[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let point_instance = f
        .array(
            f.get(&doc, "point_instance", "point_instance")?,
            "point_instance",
        )?
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.as_i64()
                .filter(|&t| t >= BACKGROUND)
                .ok_or_else(|| f.err(&format!("point_instance[{i}]"), "expected an integer >= -1"))
        })
        .collect::<Result<Vec<_>>>()?;
    if point_instance.len() != points.len() {
        return Err(f.err(
            "point_instance",
            format!("{} tags for {} points", point_instance.len(), points.len()),
        ));
    }
    let mut boxes = Vec::new();
    for (i, b) in f
        .array(f.get(&doc, "boxes", "boxes")?, "boxes")?
        .iter()
        .enumerate()
    {
        let field = |name: &str| format!("boxes[{i}].{name}");
        let center = f.vec3(f.get(b, "center", &field("center"))?, &field("center"))?;
        let size = f.vec3(f.get(b, "size", &field("size"))?, &field("size"))?;
        if size.iter().any(|&s| s <= 0.0) {
            return Err(f.err(
                &field("size"),
                format!("size components must be positive, got {size:?}"),
            ));
        }
        let heading = f.f64(f.get(b, "heading", &field("heading"))?, &field("heading"))?;
        let class_id = f.usize(
            f.get(b, "class_id", &field("class_id"))?,
            &field("class_id"),
        )?;
        let instance_id = f.usize(
            f.get(b, "instance_id", &field("instance_id"))?,
            &field("instance_id"),
        )?;
        if boxes
            .iter()
            .any(|o: &Box3D| o.class_id == class_id && o.instance_id == instance_id)
        {
            return Err(f.err(&field("instance_id"), "duplicate (class_id, instance_id)"));
        }
        boxes.push(Box3D {
            center,
            size,
            heading,
            class_id,
            instance_id,
        });
    }
    for (i, &t) in point_instance.iter().enumerate() {
        if t != BACKGROUND && !boxes.iter().any(|b| b.instance_id as i64 == t) {
            return Err(f.err(
                &format!("point_instance[{i}]"),
                format!("unknown instance {t}"),
            ));
        }
    }
    Ok(PointCloudScene {
        scene_id,
        points,
        point_instance,
        boxes,
    })
}

pub fn load_scene(path: &Path) -> Result<PointCloudScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, &path.display().to_string())
}

pub fn split_to_string(split: &DatasetSplit) -> String {
    let mut s = serde_json::to_string_pretty(split).expect("split serializes");
    s.push('\n');
    s
}

pub fn save_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, split_to_string(split)).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: DatasetSplit = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), "<document>", e.to_string()))?;
    split
        .validate()
        .map_err(|e| Error::parse(path.display().to_string(), "base/novel", e.to_string()))?;
    Ok(split)
}

pub fn scene_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.scene.json"))
}

/// Write `train/`, `test/`, `split.json` and `classes.json` under `dir`.
pub fn save_benchmark(bench: &Benchmark, dir: &Path) -> Result<()> {
    for (sub, scenes) in [("train", &bench.train), ("test", &bench.test)] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for s in scenes {
            save_scene(s, &scene_path(&d, &s.scene_id))?;
        }
    }
    save_split(&bench.split, &dir.join("split.json"))?;
    let classes = serde_json::to_string_pretty(&bench.categories).expect("categories serialize");
    let p = dir.join("classes.json");
    fs::write(&p, classes + "\n").map_err(|e| Error::io(&p, e))
}

fn load_dir(dir: &Path) -> Result<Vec<PointCloudScene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".scene.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let split = load_split(&dir.join("split.json"))?;
    let p = dir.join("classes.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let categories: Vec<CategorySpec> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(p.display().to_string(), "<document>", e.to_string()))?;
    Ok(Benchmark {
        categories,
        split,
        train: load_dir(&dir.join("train"))?,
        test: load_dir(&dir.join("test"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{catalog, generate_scene};

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456.789123), "123456.789");
        assert_eq!(format_sig9(9.9999999999), "10");
        assert_eq!(format_sig9(0.00012345678912), "0.000123456789");
        assert_eq!(format_sig9(1.5e-9), "1.5e-9");
    }

    #[test]
    fn quantize_is_idempotent() {
        for &v in &[0.1234567891234, -3.3333333333, 1e-7, 42.0, 5.55555555555e10] {
            let q = quantize(v);
            assert_eq!(quantize(q), q);
            assert_eq!(format_sig9(q), format_sig9(v));
        }
    }

    #[test]
    fn scene_round_trip_is_exact() {
        let specs = catalog(4, (150, 200));
        let scene = generate_scene(&specs, (2, 3), 3).unwrap();
        let text = scene_to_string(&scene);
        let back = parse_scene(&text, "mem").unwrap();
        assert_eq!(back, scene);
        assert_eq!(scene_to_string(&back), text);
    }

    #[test]
    fn negative_size_is_rejected_with_field_name() {
        let specs = catalog(1, (150, 200));
        let scene = generate_scene(&specs, (1, 1), 3).unwrap();
        let size = vec3(&scene.boxes[0].size);
        let bad =
            scene_to_string(&scene).replacen(&format!("\"size\":{size}"), "\"size\":[-1,1,1]", 1);
        match parse_scene(&bad, "mem") {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "boxes[0].size"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let specs = catalog(1, (150, 200));
        let scene = generate_scene(&specs, (1, 1), 3).unwrap();
        let text = scene_to_string(&scene);
        for cut in [0, 10, text.len() / 2, text.len() - 3] {
            assert!(matches!(
                parse_scene(&text[..cut], "mem"),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn unknown_instance_tag_is_rejected() {
        let text = r#"{"scene_id":"x","points":[[0,0,0]],"point_instance":[4],"boxes":[]}"#;
        match parse_scene(text, "mem") {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "point_instance[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
