use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::LenRange;
use super::vocab::{Transcript, Vocab};
use crate::error::{Error, Result};

/// Fixed pool of lorem-ipsum target transcripts.
///
/// Entry `i` has length `min + i mod width`, so any `count >= width` covers
/// every length in the range.
pub fn gen_adv_targets(vocab: &Vocab, seed: u64, count: usize, len_range: LenRange) -> Result<Vec<Transcript>> {
    if vocab.lorem_len() == 0 {
        return Err(Error::Empty("lorem vocabulary"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let lorem = vocab.lorem_ids();
    Ok((0..count)
        .map(|i| {
            let len = len_range.min + i % len_range.width();
            Transcript((0..len).map(|_| rng.random_range(lorem.clone())).collect())
        })
        .collect())
}

/// The target whose length is closest to `original`; ties go to the lowest index.
pub fn select_adv_target<'a>(original: &Transcript, targets: &'a [Transcript]) -> Result<&'a Transcript> {
    targets
        .iter()
        .enumerate()
        .min_by_key(|(i, t)| (t.len().abs_diff(original.len()), *i))
        .map(|(_, t)| t)
        .ok_or(Error::Empty("target pool"))
}

pub fn write_targets(targets: &[Transcript], vocab: &Vocab) -> String {
    let mut out = format!("advmtl-targets v1\tvocab={}\tcount={}\n", vocab.hash(), targets.len());
    for t in targets {
        out.push_str(&vocab.render(t));
        out.push('\n');
    }
    out
}

pub fn read_targets(text: &str, vocab: &Vocab) -> Result<Vec<Transcript>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
    let expected = format!("advmtl-targets v1\tvocab={}\t", vocab.hash());
    let count: usize = header
        .strip_prefix(&expected)
        .and_then(|rest| rest.strip_prefix("count="))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad targets header"))?;
    let targets = lines
        .enumerate()
        .map(|(i, l)| vocab.parse(l).map_err(|e| Error::parse(i + 2, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if targets.len() != count || targets.iter().any(|t| t.is_empty()) {
        return Err(Error::parse(0, "target count mismatch or empty target"));
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lens(ls: &[usize]) -> Vec<Transcript> {
        ls.iter().map(|&n| Transcript(vec![24; n])).collect()
    }

    #[test]
    fn closest_length_wins() {
        let pool = lens(&[3, 5, 9]);
        let orig = Transcript(vec![0; 5]);
        assert_eq!(select_adv_target(&orig, &pool).unwrap().len(), 5);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut pool = lens(&[3, 5]);
        pool[0].0[0] = 30;
        let orig = Transcript(vec![0; 4]);
        assert_eq!(select_adv_target(&orig, &pool).unwrap(), &pool[0]);
    }

    #[test]
    fn single_candidate_is_returned() {
        let pool = lens(&[8]);
        assert_eq!(select_adv_target(&Transcript(vec![1]), &pool).unwrap(), &pool[0]);
        assert!(select_adv_target(&Transcript(vec![1]), &[]).is_err());
    }

    #[test]
    fn targets_are_lorem_and_cover_lengths() {
        let v = Vocab::default();
        let range = LenRange::new(2, 6).unwrap();
        let ts = gen_adv_targets(&v, 3, 20, range).unwrap();
        assert_eq!(ts, gen_adv_targets(&v, 3, 20, range).unwrap());
        for len in 2..=6 {
            assert!(ts.iter().any(|t| t.len() == len));
        }
        for t in &ts {
            assert!(t.iter().all(|&w| v.is_lorem(w) && !v.is_content(w)));
        }
    }

    #[test]
    fn targets_file_round_trip() {
        let v = Vocab::default();
        let ts = gen_adv_targets(&v, 1, 7, LenRange::new(1, 4).unwrap()).unwrap();
        let text = write_targets(&ts, &v);
        assert_eq!(read_targets(&text, &v).unwrap(), ts);
    }
}
