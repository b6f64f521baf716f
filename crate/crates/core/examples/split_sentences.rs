//! Splits a short review into sentences, once with the default
//! abbreviation list and once with a custom one.

use ee2d::textseg::{split_sentences, SentenceSplitter};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = "Dr. Smith loved it. The plot, e.g. the twist at the end, works! Would I watch again? Yes.";
    for (i, s) in split_sentences(text)?.sentences.iter().enumerate() {
        println!("{i}: {s}");
    }

    let custom = SentenceSplitter::with_abbreviations(["approx"]);
    println!("{:?}", custom.split("It runs approx. two hours. Too long.")?.sentences);
    Ok(())
}
