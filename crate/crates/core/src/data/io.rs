use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Alphabet, LineBox, ParagraphSample, TextLine};
use crate::error::{Error, Result};
use crate::layers::ImagePlane;

/// Writes an 8-bit binary PGM. Values are rounded and clamped to 0–255.
pub fn write_pgm(path: &Path, image: &ImagePlane) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::format(path, format!("PGM needs one channel, image has {}", image.channels())));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit binary PPM from a three-channel image.
pub fn write_ppm(path: &Path, image: &ImagePlane) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::format(path, format!("PPM needs three channels, image has {}", image.channels())));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    bytes.extend(image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (`P5`, maxval ≤ 255), rescaling intensities to 0–255.
pub fn read_pgm(path: &Path) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P5" {
        return Err(Error::format(path, format!("expected binary PGM (P5), found {:?}", header[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad {what} {s:?}")));
    let (width, height, maxval) = (num(&header[1], "width")?, num(&header[2], "height")?, num(&header[3], "maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(Error::format(path, format!("pixel data truncated: need {n} bytes, have {}", bytes.len().saturating_sub(pos))));
    }
    let scale = 255.0 / maxval as f64;
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 * scale).collect();
    ImagePlane::gray(height, width, data).map_err(|e| Error::format(path, e.to_string()))
}

/// File names written for one sample, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub image: String,
    pub transcript: String,
    pub boxes: Option<String>,
}

impl SampleFiles {
    fn numbered(i: usize, with_boxes: bool) -> Self {
        SampleFiles {
            image: format!("{i:05}.pgm"),
            transcript: format!("{i:05}.txt"),
            boxes: with_boxes.then(|| format!("{i:05}.box")),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every sample plus `manifest.tsv` into `dir` and returns the
/// manifest path. Output bytes depend only on the samples.
pub fn save_dataset(dir: &Path, samples: &[ParagraphSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let boxes = s.boxes();
        let files = SampleFiles::numbered(i, boxes.is_some());
        write_pgm(&dir.join(&files.image), &s.image)?;
        let text: String = s.lines.iter().map(|l| format!("{}\n", l.text)).collect();
        write_text(&dir.join(&files.transcript), &text)?;
        manifest.push_str(&files.image);
        manifest.push('\t');
        manifest.push_str(&files.transcript);
        if let (Some(name), Some(boxes)) = (&files.boxes, boxes) {
            let text: String =
                boxes.iter().map(|b| format!("{} {} {} {}\n", b.top, b.bottom, b.left, b.right)).collect();
            write_text(&dir.join(name), &text)?;
            manifest.push('\t');
            manifest.push_str(name);
        }
        manifest.push('\n');
    }
    let path = dir.join("manifest.tsv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_boxes(path: &Path, text: &str) -> Result<Vec<LineBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<usize> = l
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::format(path, format!("bad box coordinate {t:?}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [top, bottom, left, right] if top <= bottom && left <= right => Ok(LineBox { top, bottom, left, right }),
                _ => Err(Error::format(path, format!("expected `top bottom left right`, got {l:?}"))),
            }
        })
        .collect()
}

/// Loads the samples listed in a manifest, in manifest order. Each record is
/// `<image>\t<transcript>` with an optional third `<boxes>` column; relative
/// paths resolve against the manifest's directory. When `alphabet` is given,
/// every transcript symbol must belong to it.
pub fn load_dataset(manifest: &Path, alphabet: Option<&Alphabet>) -> Result<Vec<ParagraphSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (n, record) in read_text(manifest)?.lines().enumerate() {
        if record.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = record.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::format(
                manifest,
                format!("line {}: expected 2 or 3 tab-separated columns, found {}", n + 1, cols.len()),
            ));
        }
        let image_path = base.join(cols[0]);
        let text_path = base.join(cols[1]);
        let image = read_pgm(&image_path)?;
        let transcript = read_text(&text_path)?;
        let texts: Vec<&str> = transcript.lines().collect();
        if let Some(alphabet) = alphabet {
            for c in texts.iter().flat_map(|t| t.chars()) {
                if !alphabet.contains(c) {
                    return Err(Error::UnknownSymbol { path: text_path, symbol: c });
                }
            }
        }
        let boxes = match cols.get(2) {
            Some(p) => {
                let path = base.join(p);
                let boxes = parse_boxes(&path, &read_text(&path)?)?;
                if boxes.len() != texts.len() {
                    return Err(Error::format(
                        &path,
                        format!("{} boxes for {} transcript lines", boxes.len(), texts.len()),
                    ));
                }
                boxes.into_iter().map(Some).collect()
            }
            None => vec![None; texts.len()],
        };
        let lines = texts
            .into_iter()
            .zip(boxes)
            .map(|(t, bbox)| TextLine { text: t.to_string(), bbox })
            .collect();
        samples.push(ParagraphSample { image, lines });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenSpec};

    #[test]
    fn empty_manifest_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "").unwrap();
        assert!(load_dataset(&m, None).unwrap().is_empty());
    }

    #[test]
    fn corpus_round_trips_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_corpus(&GenSpec { seed: 4, ..GenSpec::default() }, 5).unwrap();
        let m = save_dataset(dir.path(), &samples).unwrap();
        let alphabet = Alphabet::new("0123456789 ").unwrap();
        assert_eq!(load_dataset(&m, Some(&alphabet)).unwrap(), samples);
    }

    #[test]
    fn unknown_symbol_names_file_and_symbol() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_corpus(&GenSpec::default(), 1).unwrap();
        let m = save_dataset(dir.path(), &samples).unwrap();
        fs::write(dir.path().join("00000.txt"), "12\n3Z\n45\n").unwrap();
        let err = load_dataset(&m, Some(&Alphabet::new("0123456789 ").unwrap())).unwrap_err();
        match err {
            Error::UnknownSymbol { path, symbol } => {
                assert_eq!(symbol, 'Z');
                assert!(path.ends_with("00000.txt"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_image_is_an_io_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "nope.pgm\tnope.txt\n").unwrap();
        let err = load_dataset(&m, None).unwrap_err().to_string();
        assert!(err.contains("nope.pgm"), "{err}");
    }

    #[test]
    fn pgm_header_with_comment_and_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n15\n".to_vec();
        bytes.extend([0u8, 15]);
        fs::write(&p, bytes).unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.data(), &[0.0, 255.0]);
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
