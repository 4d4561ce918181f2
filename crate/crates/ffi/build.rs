fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("CLUSTERSCAN_H".to_string()),
        cpp_compat: true,
        documentation: true,
        header: Some(
            "/* C interface for the clusterscan image-restoration library.\n * Generated from the Rust source; do not edit by hand. */"
                .to_string(),
        ),
        enumeration: cbindgen::EnumConfig { prefix_with_name: true, ..Default::default() },
        ..Default::default()
    };
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation failed")
        .write_to_file(format!("{crate_dir}/include/clusterscan.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
