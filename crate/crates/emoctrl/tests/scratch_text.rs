use emoctrl::rng::subseed;
use emoctrl::synthworld::{generate_dataset, lexicon, ContentConcept, EmotionCategory};
use emoctrl::textmodel::{TextModel, TextModelConfig, Vocabulary};

fn cell_score(m: &TextModel<f32>) -> (usize, Vec<String>) {
    let mut ok = 0;
    let mut misses = Vec::new();
    for &e in &EmotionCategory::ALL {
        for &c in &ContentConcept::ALL {
            let cap = m.sample_caption_greedy(e, c);
            let has_concept = cap.split_whitespace().any(|w| w == c.name());
            let has_lex = cap.split_whitespace().any(|w| lexicon(e).contains(&w));
            if has_concept && has_lex {
                ok += 1;
            } else {
                misses.push(format!("{}/{}: {:?}", e.name(), c.name(), cap));
            }
        }
    }
    (ok, misses)
}

#[test]
fn sweep() {
    let ds = generate_dataset(800, 192, 11);
    // The exact seed derivations the harness uses, across three roots.
    for root in [7u64, 8, 9] {
        let mut m = TextModel::new(
            TextModelConfig::default(),
            Vocabulary::core(),
            subseed(root, "harness/text-init", 0),
        );
        let t0 = std::time::Instant::now();
        let pre = m
            .pretrain_base(1500, 32, 1e-3, subseed(root, "harness/text-pretrain", 0))
            .unwrap();
        let emo = m
            .train_emotion(&ds.train, 1000, 32, 3e-3, subseed(root, "harness/text-train", 0))
            .unwrap();
        let (ok, misses) = cell_score(&m);
        println!(
            "root {root}: pre_loss {:.3} emo_loss {:.3} cells {ok}/64 [{:.0}s]",
            pre.last().unwrap(),
            emo.last().unwrap(),
            t0.elapsed().as_secs_f64()
        );
        for miss in misses.iter().take(3) {
            println!("  MISS {miss}");
        }
    }
}
