//! Compiles the guide's code blocks as doctests: each chapter becomes the
//! documentation of an empty module.

macro_rules! chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $name {}
        )*
    };
}

chapters! {
    introduction => "introduction.md",
    quickstart => "quickstart.md",
    configuration => "configuration.md",
    firewall => "firewall.md",
    llm => "llm.md",
    themes => "themes.md",
    testing => "testing.md",
    estimation => "estimation.md",
    completeness => "completeness.md",
    annotation => "annotation.md",
    reproducibility => "reproducibility.md",
}
