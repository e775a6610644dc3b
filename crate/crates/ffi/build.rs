use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("cargo sets this"));
    let header = crate_dir.join("include").join("bodyfit.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("BODYFIT_H".to_string()),
        cpp_compat: true,
        documentation: true,
        ..Default::default()
    };

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("binding generation")
        .write_to_file(&header);

    println!("cargo:rerun-if-changed=src/lib.rs");
}
