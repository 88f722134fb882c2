//! Produces the two augmented views of one synthetic image for a few epochs
//! and writes them as PNGs.

use mvcons::augment::{make_views, AugmentSpec};
use mvcons::data::{render_synthetic, write_png, SynthSpec};

fn main() -> mvcons::Result<()> {
    let (source, _) = render_synthetic(&SynthSpec::default())?;
    let sample = &source.samples[0];
    let out = std::env::temp_dir().join("mvcons_views");
    std::fs::create_dir_all(&out).map_err(|e| mvcons::Error::io(&out, e))?;
    write_png(&out.join("clean.png"), &sample.image)?;
    for epoch in 0..3 {
        let (a, b) = make_views(sample, &AugmentSpec::default(), 0, epoch);
        write_png(&out.join(format!("epoch{epoch}_a.png")), &a.image)?;
        write_png(&out.join(format!("epoch{epoch}_b.png")), &b.image)?;
    }
    println!("views of `{}` written to {}", sample.id, out.display());
    Ok(())
}
