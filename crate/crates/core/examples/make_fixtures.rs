//! Regenerates the committed files under `fixtures/`.
//!
//! cargo run -p backtrans-core --example make_fixtures -- fixtures

use std::fs;
use std::path::{Path, PathBuf};

use backtrans_core::corpus::{BilingualCorpus, LanguageTag, MonolingualCorpus};
use backtrans_core::subword::learn_bpe;
use backtrans_core::synthetic::{SyntheticConfig, SyntheticLanguagePair};
use backtrans_core::translator::{train, TrainConfig, TranslatorModel};
use sha2::{Digest, Sha256};

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

fn bilingual_tsv(c: &BilingualCorpus, dirty: &[(&str, &str)]) -> String {
    let mut s = String::new();
    for p in &c.pairs {
        s.push_str(&format!("{}\t{}\n", p.source, p.target));
    }
    for (a, b) in dirty {
        s.push_str(&format!("{a}\t{b}\n"));
    }
    s
}

fn mono_txt(c: &MonolingualCorpus) -> String {
    c.sentences.iter().map(|s| format!("{s}\n")).collect()
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    fs::create_dir_all(out.join("data")).unwrap();
    let en = LanguageTag::new("en").unwrap();
    let lg = LanguageTag::new("lg").unwrap();
    let lang = SyntheticLanguagePair::generate(en.clone(), lg.clone(), SyntheticConfig::default());
    let sv = lang.source_vocab();
    let tv = lang.target_vocab();

    let general = lang.bilingual("general", 250, 1);
    let mixed = format!("{} {} {} {}", sv[0], tv[1], tv[2], sv[3]);
    let dirty = [
        (
            format!("{} https://example.org/x {}", sv[4], sv[5]),
            format!("{} {}", tv[4], tv[5]),
        ),
        (mixed, format!("{} {} {} {}", tv[0], tv[1], tv[2], tv[3])),
        (general.pairs[0].source.clone(), general.pairs[0].target.clone()),
        (format!("{} @@ {}", sv[7], sv[8]), format!("{} {}", tv[7], tv[8])),
    ];
    let dirty: Vec<(&str, &str)> = dirty.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    write(&out.join("data/general.en-lg.tsv"), &bilingual_tsv(&general, &dirty));
    write(
        &out.join("data/bible.en-lg.tsv"),
        &bilingual_tsv(&lang.bilingual("bible", 80, 2), &[]),
    );
    write(
        &out.join("data/newtest.en-lg.tsv"),
        &bilingual_tsv(&lang.bilingual("newtest", 40, 3), &[]),
    );

    write(
        &out.join("data/news.en.txt"),
        &mono_txt(&lang.monolingual_source("news-en", 250, 100)),
    );
    write(
        &out.join("data/web.en.txt"),
        &mono_txt(&lang.word_salad("web-en", &en, 250, 101)),
    );
    write(
        &out.join("data/spam.en.txt"),
        &mono_txt(&lang.gibberish("spam-en", &en, 250, 102)),
    );
    write(
        &out.join("data/news.lg.txt"),
        &mono_txt(&lang.monolingual_target("news-lg", 250, 200)),
    );
    write(
        &out.join("data/web.lg.txt"),
        &mono_txt(&lang.word_salad("web-lg", &lg, 250, 201)),
    );
    write(
        &out.join("data/spam.lg.txt"),
        &mono_txt(&lang.gibberish("spam-lg", &lg, 250, 202)),
    );

    write(
        &out.join("data/en.words"),
        &sv.iter().map(|w| format!("{w}\n")).collect::<String>(),
    );
    write(
        &out.join("data/lg.words"),
        &tv.iter().map(|w| format!("{w}\n")).collect::<String>(),
    );

    write(
        &out.join("manifest.tsv"),
        "# id\tlanguage\tsource tag\tpath\n\
         general\ten>lg\tgeneral\tdata/general.en-lg.tsv\n\
         bible\ten>lg\tbible\tdata/bible.en-lg.tsv\n\
         newtest\ten>lg\tnewtest\tdata/newtest.en-lg.tsv\n\
         news-en\ten\tnews\tdata/news.en.txt\n\
         web-en\ten\tweb\tdata/web.en.txt\n\
         spam-en\ten\tspam\tdata/spam.en.txt\n\
         news-lg\tlg\tnews\tdata/news.lg.txt\n\
         web-lg\tlg\tweb\tdata/web.lg.txt\n\
         spam-lg\tlg\tspam\tdata/spam.lg.txt\n",
    );

    // A model written by an older build, for format-version checks.
    let small = lang.bilingual("tiny", 20, 9);
    let text: Vec<&str> = small.sources().chain(small.targets()).collect();
    let bpe = learn_bpe(text, 200).unwrap();
    let model: TranslatorModel = train(&small, &small, &bpe, &TrainConfig::default()).unwrap();
    let p = out.join("old-format.model");
    model.save(&p).unwrap();
    let saved = fs::read_to_string(&p).unwrap();
    let body = &saved[..saved.rfind("[end]\tsha256=").unwrap()];
    let mut lines = body.splitn(2, '\n');
    let header = lines.next().unwrap();
    let header = header
        .split(' ')
        .map(|f| {
            if f.starts_with("format=") {
                "format=0".to_string()
            } else if f.starts_with("tool=") {
                "tool=0.0.1".to_string()
            } else {
                f.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    let body = format!("{header}\n{}", lines.next().unwrap());
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    write(&p, &format!("{body}[end]\tsha256={digest}\n"));
}
