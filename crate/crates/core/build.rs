fn main() {
    println!("cargo:rerun-if-changed=build.rs");
    #[cfg(feature = "hdf5")]
    {
        if let Err(e) = pkg_config::Config::new().probe("hdf5") {
            // Debian-style installs keep the serial build under its own name.
            pkg_config::Config::new()
                .probe("hdf5-serial")
                .unwrap_or_else(|_| panic!("libhdf5 not found via pkg-config: {e}"));
        }
    }
}
