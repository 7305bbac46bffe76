use std::env;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    let config = cbindgen::Config::from_file("cbindgen.toml").expect("cbindgen.toml parses");
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        // Regenerates the committed header so it never drifts from the source.
        Ok(bindings) => {
            bindings.write_to_file("include/masklab.h");
        }
        Err(err) => println!("cargo:warning=skipping masklab.h generation: {err}"),
    }
}
