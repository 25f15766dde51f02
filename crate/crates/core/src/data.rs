//! Graded image manifests, class counts, train/validation splits and a
//! synthetic fundus generator.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::{Image, StatsAccumulator, DatasetStats};

pub const NUM_GRADES: usize = 5;
pub const GRADE_NAMES: [&str; NUM_GRADES] = ["normal", "mild", "moderate", "severe", "PDR"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitTag {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Path as written in the manifest, relative to its directory unless absolute.
    pub image: String,
    pub grade: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub tag: SplitTag,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, tag: SplitTag, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::validation("manifest has no records"));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.grade >= NUM_GRADES {
                return Err(Error::validation(format!("grade {} of {} is outside 0..{NUM_GRADES}", r.grade, r.image)));
            }
            if !seen.insert(r.image.as_str()) {
                return Err(Error::validation(format!("duplicate image path {}", r.image)));
            }
        }
        Ok(Self {
            base_dir: base_dir.into(),
            tag,
            records,
        })
    }

    /// Reads a two-column CSV manifest with header `image,grade`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_tagged(path, SplitTag::Train)
    }

    pub fn load_tagged(path: &Path, tag: SplitTag) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Resolve {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base, tag)
    }

    fn parse(text: &str, path: &Path, base_dir: PathBuf, tag: SplitTag) -> Result<Self> {
        let fail = |line: u64, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if text.trim().is_empty() {
            return Err(fail(1, "manifest is empty".into()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_ascii_lowercase).collect();
        if header != ["image", "grade"] {
            return Err(fail(1, format!("header must be `image,grade`, found `{}`", header.join(","))));
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for result in reader.records() {
            let row = result?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 2 {
                return Err(fail(line, format!("expected 2 fields, found {}", row.len())));
            }
            let image = row[0].to_string();
            if image.is_empty() {
                return Err(fail(line, "empty image path".into()));
            }
            let grade: usize = row[1]
                .parse()
                .map_err(|_| fail(line, format!("grade `{}` is not an integer", &row[1])))?;
            if grade >= NUM_GRADES {
                return Err(fail(line, format!("grade {grade} is outside 0..{NUM_GRADES}")));
            }
            if !seen.insert(image.clone()) {
                return Err(fail(line, format!("duplicate image path {image}")));
            }
            records.push(Record { image, grade });
        }
        if records.is_empty() {
            return Err(fail(2, "manifest has a header but no records".into()));
        }
        Ok(Self {
            base_dir,
            tag,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.grade).collect()
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let p = Path::new(&record.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Decodes every image, in manifest order.
    pub fn load_images(&self) -> Result<Vec<Image>> {
        self.records
            .par_iter()
            .map(|r| Image::load(&self.resolve(r)))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "grade"])?;
        for r in &self.records {
            w.write_record([r.image.as_str(), &r.grade.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    fn subset(&self, indices: &[usize], tag: SplitTag) -> Manifest {
        Manifest {
            base_dir: self.base_dir.clone(),
            tag,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassDistribution {
    pub counts: [usize; NUM_GRADES],
}

impl ClassDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl fmt::Display for ClassDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>6}", "label", "count")?;
        for (name, n) in GRADE_NAMES.iter().zip(self.counts) {
            writeln!(f, "{name:<10} {n:>6}")?;
        }
        write!(f, "{:<10} {:>6}", "total", self.total())
    }
}

pub fn class_distribution(m: &Manifest) -> ClassDistribution {
    let mut d = ClassDistribution::default();
    for r in &m.records {
        d.counts[r.grade] += 1;
    }
    d
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Manifest,
    pub val: Manifest,
    pub warnings: Vec<String>,
}

/// Seeded train/validation partition.
///
/// Plain mode moves `floor(n·f)` shuffled records to validation; stratified
/// mode moves `floor(n_c·f)` records of every class `c`. Both halves keep
/// manifest order.
pub fn split(m: &Manifest, val_fraction: f64, seed: u64, stratified: bool) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::validation(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_val = vec![false; m.len()];
    let mut warnings = Vec::new();
    if stratified {
        for grade in 0..NUM_GRADES {
            let mut idx: Vec<usize> = (0..m.len()).filter(|&i| m.records[i].grade == grade).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * val_fraction).floor() as usize;
            if k == 0 {
                warnings.push(format!("class {} ({}) has no validation samples", grade, GRADE_NAMES[grade]));
            }
            if k == idx.len() {
                warnings.push(format!("class {} ({}) has no training samples", grade, GRADE_NAMES[grade]));
            }
            idx[..k].iter().for_each(|&i| in_val[i] = true);
        }
    } else {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.shuffle(&mut rng);
        let k = (m.len() as f64 * val_fraction).floor() as usize;
        idx[..k].iter().for_each(|&i| in_val[i] = true);
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..m.len()).partition(|&i| in_val[i]);
    if val.is_empty() {
        warnings.push("validation split is empty".into());
    }
    let train = m.subset(&train, m.tag);
    let val = m.subset(&val, m.tag);
    for (grade, (&n_train, &n_all)) in class_distribution(&train)
        .counts
        .iter()
        .zip(&class_distribution(m).counts)
        .enumerate()
    {
        if n_all > 0 && n_train == 0 && !stratified {
            warnings.push(format!("class {} ({}) has no training samples", grade, GRADE_NAMES[grade]));
        }
    }
    Ok(Split { train, val, warnings })
}

/// Per-channel statistics over every image of a manifest.
pub fn manifest_stats(m: &Manifest) -> Result<DatasetStats> {
    let mut acc = StatsAccumulator::default();
    for r in &m.records {
        acc.add(&Image::load(&m.resolve(r))?);
    }
    acc.finish()
}

/// Inclusive ranges of bright-blob (exudate-like) and red-dot
/// (haemorrhage-like) counts per grade.
pub const LESION_COUNTS: [((usize, usize), (usize, usize)); NUM_GRADES] = [
    ((0, 0), (0, 0)),
    ((1, 2), (2, 3)),
    ((3, 4), (4, 6)),
    ((5, 7), (7, 9)),
    ((8, 10), (10, 12)),
];

/// Lesions drawn into one synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthLesions {
    pub blobs: usize,
    pub dots: usize,
    pub vessels: usize,
}

fn disc(img: &mut Image, cy: f64, cx: f64, r: f64, rgb: [u8; 3], inside: &dyn Fn(f64, f64) -> bool) {
    let n = img.height() as isize;
    let lo_y = ((cy - r).floor() as isize).max(0);
    let hi_y = ((cy + r).ceil() as isize).min(n - 1);
    let lo_x = ((cx - r).floor() as isize).max(0);
    let hi_x = ((cx + r).ceil() as isize).min(img.width() as isize - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            if (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r && inside(fy, fx) {
                img.set(y as usize, x as usize, rgb);
            }
        }
    }
}

/// One fundus-like image: black surround, orange retinal field with radial
/// shading, a bright optic disc, then grade-dependent lesions.
pub fn synth_image(grade: usize, resolution: usize, rng: &mut ChaCha8Rng) -> (Image, SynthLesions) {
    let n = resolution as f64;
    let c = n / 2.0;
    let radius = 0.46 * n;
    let mut img = Image::filled(resolution, resolution, [0, 0, 0]);
    let tint: f64 = rng.random_range(0.85..1.0);
    for y in 0..resolution {
        for x in 0..resolution {
            let d = (((y as f64 + 0.5) - c).powi(2) + ((x as f64 + 0.5) - c).powi(2)).sqrt() / radius;
            if d <= 1.0 {
                let shade = tint * (1.0 - 0.45 * d * d);
                img.set(y, x, [(190.0 * shade) as u8, (85.0 * shade) as u8, (35.0 * shade) as u8]);
            }
        }
    }
    let in_field = |y: f64, x: f64| (y - c).powi(2) + (x - c).powi(2) <= radius * radius;
    let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let (od_y, od_x) = (c + rng.random_range(-0.05..0.05) * n, c + side * 0.22 * n);
    disc(&mut img, od_y, od_x, 0.08 * n, [245, 215, 150], &in_field);

    let ((b_lo, b_hi), (d_lo, d_hi)) = LESION_COUNTS[grade];
    let blobs = rng.random_range(b_lo..=b_hi);
    let dots = rng.random_range(d_lo..=d_hi);
    let place = |rng: &mut ChaCha8Rng| loop {
        let y = rng.random_range(0.0..n);
        let x = rng.random_range(0.0..n);
        let from_centre = ((y - c).powi(2) + (x - c).powi(2)).sqrt();
        let from_disc = ((y - od_y).powi(2) + (x - od_x).powi(2)).sqrt();
        if from_centre < 0.85 * radius && from_disc > 0.12 * n {
            break (y, x);
        }
    };
    let lesion_r = (0.035 * n).max(1.5);
    for _ in 0..blobs {
        let (y, x) = place(rng);
        disc(&mut img, y, x, lesion_r, [250, 240, 120], &in_field);
    }
    for _ in 0..dots {
        let (y, x) = place(rng);
        disc(&mut img, y, x, lesion_r * 0.8, [90, 10, 10], &in_field);
    }
    let vessels = if grade == NUM_GRADES - 1 { 3 } else { 0 };
    for _ in 0..vessels {
        let (mut y, mut x) = place(rng);
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 0..(n as usize / 3) {
            disc(&mut img, y, x, (0.012 * n).max(0.8), [150, 20, 30], &in_field);
            heading += rng.random_range(-0.6..0.6);
            y += heading.sin();
            x += heading.cos();
        }
    }
    (img, SynthLesions { blobs, dots, vessels })
}

/// Writes `n_per_class` images per grade as PNG plus `manifest.csv` into `out_dir`.
///
/// Image `i` draws from the ChaCha stream `i` of `seed`, so every file is a
/// pure function of `(seed, i, resolution)`.
pub fn synth_dataset(out_dir: &Path, n_per_class: usize, resolution: usize, seed: u64) -> Result<Manifest> {
    if n_per_class == 0 {
        return Err(Error::validation("n_per_class must be ≥ 1"));
    }
    if resolution < 8 {
        return Err(Error::validation("synthetic resolution must be ≥ 8"));
    }
    std::fs::create_dir_all(out_dir)?;
    let jobs: Vec<(usize, usize)> = (0..n_per_class)
        .flat_map(|i| (0..NUM_GRADES).map(move |g| (i, g)))
        .collect();
    let records = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, grade))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let (img, _) = synth_image(grade, resolution, &mut rng);
            let name = format!("grade{grade}_{i:04}.png");
            img.save(&out_dir.join(&name))?;
            Ok(Record { image: name, grade })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(out_dir, SplitTag::Train, records)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(counts: [usize; NUM_GRADES]) -> Manifest {
        let records = counts
            .iter()
            .enumerate()
            .flat_map(|(g, &n)| (0..n).map(move |i| Record {
                image: format!("IDRiD_{g}_{i:03}.jpg"),
                grade: g,
            }))
            .collect();
        Manifest::new("/data", SplitTag::Train, records).unwrap()
    }

    const IDRID_TRAIN: [usize; 5] = [134, 20, 136, 74, 49];

    #[test]
    fn manifest_parsing() {
        let m = fixture(IDRID_TRAIN);
        let text = m.to_csv().unwrap();
        let back = Manifest::parse(&text, Path::new("m.csv"), "/data".into(), SplitTag::Train).unwrap();
        assert_eq!(back.len(), 413);
        assert_eq!(class_distribution(&back).counts, IDRID_TRAIN);

        let err = Manifest::parse("", Path::new("m.csv"), "".into(), SplitTag::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = Manifest::parse("image,grade\n", Path::new("m.csv"), "".into(), SplitTag::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));

        let bad = "image,grade\na.png,0\nb.png,1\nc.png,2\nd.png,7\n";
        match Manifest::parse(bad, Path::new("m.csv"), "".into(), SplitTag::Train) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains('7'));
            }
            other => panic!("{other:?}"),
        }
        let dup = "image,grade\na.png,0\na.png,1\n";
        assert!(matches!(
            Manifest::parse(dup, Path::new("m.csv"), "".into(), SplitTag::Train),
            Err(Error::Parse { line: 3, .. })
        ));
        let header = "path,label\na.png,0\n";
        assert!(Manifest::parse(header, Path::new("m.csv"), "".into(), SplitTag::Train).is_err());
    }

    #[test]
    fn missing_image_is_a_resolution_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "image,grade\nnope.png,0\n").unwrap();
        let m = Manifest::load(&path).unwrap();
        assert!(matches!(m.load_images(), Err(Error::Resolve { .. })));
    }

    #[test]
    fn distribution_examples() {
        let one = fixture([1, 0, 0, 0, 0]);
        assert_eq!(class_distribution(&one).counts, [1, 0, 0, 0, 0]);
        let text = class_distribution(&fixture(IDRID_TRAIN)).to_string();
        assert!(text.contains("PDR") && text.contains("413"));
    }

    #[test]
    fn split_examples() {
        let m = fixture(IDRID_TRAIN);
        let s = split(&m, 0.2, 1, false).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (331, 82));
        let again = split(&m, 0.2, 1, false).unwrap();
        assert_eq!(s.val.records, again.val.records);

        let s = split(&m, 0.2, 1, true).unwrap();
        assert_eq!(class_distribution(&s.val).counts[1], 4);
        assert_eq!(class_distribution(&s.val).counts, [26, 4, 27, 14, 9]);

        let tiny = fixture([3, 3, 3, 3, 3]);
        let s = split(&tiny, 0.2, 0, true).unwrap();
        assert!(!s.warnings.is_empty());
        assert!(split(&tiny, 1.0, 0, true).is_err());
    }

    #[test]
    fn synthetic_dataset_is_deterministic_and_loadable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_dataset(a.path(), 4, 32, 11).unwrap();
        let mb = synth_dataset(b.path(), 4, 32, 11).unwrap();
        assert_eq!(ma.records, mb.records);
        assert_eq!(ma.len(), 20);
        assert_eq!(class_distribution(&ma).counts, [4; 5]);
        for r in &ma.records {
            let x = std::fs::read(a.path().join(&r.image)).unwrap();
            let y = std::fs::read(b.path().join(&r.image)).unwrap();
            assert_eq!(x, y, "{}", r.image);
        }
        let reloaded = Manifest::load(&a.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.records, ma.records);
        let images = reloaded.load_images().unwrap();
        for img in &images {
            assert_eq!((img.height(), img.width()), (32, 32));
            crate::preprocess::prepare(img, 3, 16).unwrap();
        }
    }

    #[test]
    fn lesion_counts_increase_with_grade() {
        let mean = |range: (usize, usize)| (range.0 + range.1) as f64 / 2.0;
        for g in 1..NUM_GRADES {
            assert!(mean(LESION_COUNTS[g].0) > mean(LESION_COUNTS[g - 1].0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut avg = [0.0; NUM_GRADES];
        for (g, slot) in avg.iter_mut().enumerate() {
            for _ in 0..50 {
                *slot += synth_image(g, 32, &mut rng).1.blobs as f64 / 50.0;
            }
        }
        assert!(avg.windows(2).all(|w| w[1] > w[0]), "{avg:?}");
    }

    proptest! {
        #[test]
        fn split_is_a_partition(counts in prop::array::uniform5(0usize..30), f in 0.05f64..0.95, seed in any::<u64>(), strat in any::<bool>()) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let m = fixture(counts);
            let s = split(&m, f, seed, strat).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len(), m.len());
            let train: HashSet<_> = s.train.records.iter().map(|r| r.image.clone()).collect();
            prop_assert!(s.val.records.iter().all(|r| !train.contains(&r.image)));
            if strat {
                let all = class_distribution(&m).counts;
                let val = class_distribution(&s.val).counts;
                for g in 0..NUM_GRADES {
                    prop_assert!((val[g] as f64 - all[g] as f64 * f).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn distribution_ignores_order(counts in prop::array::uniform5(0usize..20), seed in any::<u64>()) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let m = fixture(counts);
            let mut shuffled = m.clone();
            shuffled.records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let d = class_distribution(&shuffled);
            prop_assert_eq!(d, class_distribution(&m));
            prop_assert_eq!(d.total(), m.len());
        }
    }
}
