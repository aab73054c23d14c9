use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Duplicates randomly chosen members of every minority class until each
/// class matches the majority count. Originals come first, in their input
/// order, followed by the duplicates class by class.
pub fn upsample_balance<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, r) in dataset.records.iter().enumerate() {
        by_class
            .get_mut(r.label)
            .ok_or_else(|| Error::Record {
                id: r.id.clone(),
                msg: format!("label {} out of range", r.label),
            })?
            .push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "class {empty} has no samples to upsample from"
        )));
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = dataset.clone();
    for members in &by_class {
        for _ in members.len()..target {
            let pick = members[rng.random_range(0..members.len())];
            out.records.push(dataset.records[pick].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureRecord;
    use crate::nn::ModelRng;
    use rand::SeedableRng;

    fn dataset(counts: &[usize]) -> Dataset {
        let mut records = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(FeatureRecord {
                    id: format!("c{label}-{i}"),
                    text: vec![i as f64],
                    image: vec![label as f64],
                    label,
                });
            }
        }
        Dataset {
            text_dim: 1,
            image_dim: 1,
            num_classes: counts.len(),
            records,
        }
    }

    #[test]
    fn already_balanced_is_identity() {
        let d = dataset(&[4, 4, 4]);
        let out = upsample_balance(&d, &mut ModelRng::seed_from_u64(1)).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn duplicates_come_from_the_minority_class() {
        let d = dataset(&[3, 7]);
        let out = upsample_balance(&d, &mut ModelRng::seed_from_u64(9)).unwrap();
        assert_eq!(out.class_counts(), vec![7, 7]);
        assert_eq!(&out.records[..10], &d.records[..]);
        for dup in &out.records[10..] {
            assert_eq!(dup.label, 0);
            assert!(d.records[..3].contains(dup));
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let d = dataset(&[3, 0, 2]);
        assert!(upsample_balance(&d, &mut ModelRng::seed_from_u64(0)).is_err());
    }
}
