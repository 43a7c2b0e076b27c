//! The chapters of `book/`, compiled as documentation so that
//! `cargo test` runs every code block in them.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(trajectories, "trajectories.md");
chapter!(intentions, "intentions.md");
chapter!(intention_clip, "intention-clip.md");
chapter!(retrieval, "retrieval.md");
chapter!(refiner, "refiner.md");
chapter!(prediction, "prediction.md");
chapter!(experiments, "experiments.md");
