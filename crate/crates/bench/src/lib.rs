//! Shared fixtures for the kernel benchmarks in `benches/`.

use streamdet_core::datagen::{generate_dataset, Dataset, SyntheticSpec};

/// A seeded dataset shaped like the end-to-end benchmark: 5x5 grid, 64
/// channels, 100 proposals per image.
pub fn fixture_dataset(images_per_class: usize) -> Dataset {
    generate_dataset(&SyntheticSpec {
        num_classes: 10,
        images_per_class,
        grid: [5, 5],
        channels: 64,
        num_codebooks: 8,
        class_signal_strength: 2.0,
        noise_std: 0.5,
        boxes_per_image: [1, 3],
        max_box_cells: 3,
        cell_pixels: 16,
        proposals_per_image: 100,
        jittered_per_box: 8,
        test_fraction: 0.2,
        seed: 7,
    })
    .expect("fixture spec is valid")
}
