use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::{GraphBuilder, Model, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

const CIFAR_CHW: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Resnet18,
    Alexnet,
    Tinycnn,
}

impl ModelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::Resnet18 => "resnet18",
            ModelName::Alexnet => "alexnet",
            ModelName::Tinycnn => "tinycnn",
        }
    }

    /// Label used in report rows, e.g. "ResNet-18".
    pub fn display_name(self) -> &'static str {
        match self {
            ModelName::Resnet18 => "ResNet-18",
            ModelName::Alexnet => "AlexNet",
            ModelName::Tinycnn => "TinyCNN",
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "resnet18" => Ok(ModelName::Resnet18),
            "alexnet" => Ok(ModelName::Alexnet),
            "tinycnn" => Ok(ModelName::Tinycnn),
            _ => Err(Error::Config(format!("unknown model {s:?} (expected resnet18, alexnet or tinycnn)"))),
        }
    }
}

pub fn build_model<T: Scalar>(name: ModelName, num_classes: usize, seed: u64) -> Result<Model<T>> {
    match name {
        ModelName::Resnet18 => build_resnet18_cifar(num_classes, seed),
        ModelName::Alexnet => build_alexnet_cifar(num_classes, seed),
        ModelName::Tinycnn => build_tinycnn(num_classes, seed),
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    Ok(())
}

/// conv3x3-BN-ReLU-conv3x3-BN plus a skip path, summed, then ReLU. The skip
/// is a 1x1 strided conv + BN when channels or resolution change.
pub fn basic_block<T: Scalar>(b: &mut GraphBuilder<T>, name: &str, from: NodeId, cin: usize, cout: usize, stride: usize) -> NodeId {
    let c1 = b.conv(&format!("{name}.conv1"), from, cin, cout, 3, stride, 1, false);
    let n1 = b.bn(&format!("{name}.bn1"), c1, cout);
    let r1 = b.relu(&format!("{name}.relu1"), n1);
    let c2 = b.conv(&format!("{name}.conv2"), r1, cout, cout, 3, 1, 1, false);
    let n2 = b.bn(&format!("{name}.bn2"), c2, cout);
    let skip = if stride != 1 || cin != cout {
        let sc = b.conv(&format!("{name}.shortcut.conv"), from, cin, cout, 1, stride, 0, false);
        b.bn(&format!("{name}.shortcut.bn"), sc, cout)
    } else {
        from
    };
    let sum = b.add(&format!("{name}.add"), n2, skip);
    b.relu(&format!("{name}.relu2"), sum)
}

/// Builds one residual block on its own, for tests and benchmarks.
pub fn build_basic_block<T: Scalar>(chw: [usize; 3], cout: usize, stride: usize, seed: u64) -> Result<Model<T>> {
    let mut b = GraphBuilder::new(chw);
    let out = basic_block(&mut b, "block", 0, chw[0], cout, stride);
    b.build("basic_block", out, cout, seed)
}

/// ResNet-18 with a 3x3 stride-1 stem for 32x32 inputs.
pub fn build_resnet18_cifar<T: Scalar>(num_classes: usize, seed: u64) -> Result<Model<T>> {
    check_classes(num_classes)?;
    let mut b = GraphBuilder::new(CIFAR_CHW);
    let c = b.conv("conv1", 0, 3, 64, 3, 1, 1, false);
    let n = b.bn("bn1", c, 64);
    let mut x = b.relu("relu", n);
    let mut cin = 64;
    for (stage, (&cout, &stride)) in [64, 128, 256, 512].iter().zip(&[1, 2, 2, 2]).enumerate() {
        x = basic_block(&mut b, &format!("layer{}.0", stage + 1), x, cin, cout, stride);
        x = basic_block(&mut b, &format!("layer{}.1", stage + 1), x, cout, cout, 1);
        cin = cout;
    }
    let p = b.global_avg_pool("avgpool", x);
    let f = b.flatten("flatten", p);
    let out = b.linear("linear", f, 512, num_classes);
    b.build("resnet18", out, num_classes, seed)
}

/// Five 3x3 convs (64, 192, 384, 256, 256) with three 2x2 max pools
/// (32 -> 16 -> 8 -> 4), then fc 4096 -> 512 -> classes.
pub fn build_alexnet_cifar<T: Scalar>(num_classes: usize, seed: u64) -> Result<Model<T>> {
    check_classes(num_classes)?;
    let mut b = GraphBuilder::new(CIFAR_CHW);
    let mut x = 0;
    let mut cin = 3;
    for (i, &cout) in [64, 192, 384, 256, 256].iter().enumerate() {
        let c = b.conv(&format!("features.conv{}", i + 1), x, cin, cout, 3, 1, 1, true);
        x = b.relu(&format!("features.relu{}", i + 1), c);
        if matches!(i, 0 | 1 | 4) {
            x = b.max_pool(&format!("features.pool{}", i + 1), x, 2, 2);
        }
        cin = cout;
    }
    let f = b.flatten("flatten", x);
    let h = b.linear("classifier.fc1", f, 256 * 4 * 4, 512);
    let h = b.relu("classifier.relu", h);
    let out = b.linear("classifier.fc2", h, 512, num_classes);
    b.build("alexnet", out, num_classes, seed)
}

/// Two conv-BN-ReLU-maxpool blocks (8 and 16 channels) and a linear head.
pub fn build_tinycnn<T: Scalar>(num_classes: usize, seed: u64) -> Result<Model<T>> {
    check_classes(num_classes)?;
    let mut b = GraphBuilder::new(CIFAR_CHW);
    let mut x = 0;
    let mut cin = 3;
    for (i, &cout) in [8, 16].iter().enumerate() {
        let c = b.conv(&format!("block{}.conv", i + 1), x, cin, cout, 3, 1, 1, false);
        let n = b.bn(&format!("block{}.bn", i + 1), c, cout);
        let r = b.relu(&format!("block{}.relu", i + 1), n);
        x = b.max_pool(&format!("block{}.pool", i + 1), r, 2, 2);
        cin = cout;
    }
    let f = b.flatten("flatten", x);
    let out = b.linear("head", f, 16 * 8 * 8, num_classes);
    b.build("tinycnn", out, num_classes, seed)
}
