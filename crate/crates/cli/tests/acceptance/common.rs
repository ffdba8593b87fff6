use s3l_core::dataset::{render_all, ImageSet, Split, SyntheticSpec};

pub fn sets(spec: &SyntheticSpec) -> (ImageSet, ImageSet) {
    let all = render_all(spec).expect("render");
    (
        ImageSet::from_rendered(&all, Split::Train, spec.size, spec.classes).expect("train"),
        ImageSet::from_rendered(&all, Split::Test, spec.size, spec.classes).expect("test"),
    )
}

pub fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
