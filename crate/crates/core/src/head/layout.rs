use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a branch turns the RoI grid into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchKind {
    /// Two 3×3 convs with ReLU.
    Conv,
    /// A 3×3 conv followed by a strip module.
    Strip,
    /// Two fully connected layers with ReLU, not shared.
    Fc,
}

/// Which outputs a branch predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchTarget {
    Xy,
    Wh,
    Xywh,
    Theta,
}

impl BranchTarget {
    pub fn width(self) -> usize {
        match self {
            BranchTarget::Xy | BranchTarget::Wh => 2,
            BranchTarget::Xywh => 4,
            BranchTarget::Theta => 1,
        }
    }
}

/// Head structures compared in the head-design ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadLayout {
    /// Everything from the shared FCs.
    JointFc,
    /// Conv branches for (x,y) and (w,h), separate FC branch for θ.
    ConvBranches,
    /// Conv branches for (x,y), (w,h) and θ.
    ConvBranchesThetaConv,
    /// Strip on (x,y), conv on (w,h), FC θ.
    StripXy,
    /// Conv on (x,y), strip on (w,h), FC θ.
    StripWh,
    /// Conv on (x,y) and (w,h), strip θ.
    StripTheta,
    /// Strip on (x,y,w,h), separate FC θ.
    StripLocSeparateThetaFc,
    /// Strip on (x,y,w,h), θ from the classification FCs.
    #[default]
    StripLocSharedThetaFc,
    /// Strip on (x,y,w,h) and strip θ.
    StripLocThetaStrip,
}

pub const ALL_LAYOUTS: [HeadLayout; 9] = [
    HeadLayout::JointFc,
    HeadLayout::ConvBranches,
    HeadLayout::ConvBranchesThetaConv,
    HeadLayout::StripXy,
    HeadLayout::StripWh,
    HeadLayout::StripTheta,
    HeadLayout::StripLocSeparateThetaFc,
    HeadLayout::StripLocSharedThetaFc,
    HeadLayout::StripLocThetaStrip,
];

impl HeadLayout {
    /// Branches besides the shared FC trunk, in output order.
    pub fn branches(self) -> Vec<(BranchTarget, BranchKind)> {
        use BranchKind::*;
        use BranchTarget::*;
        match self {
            HeadLayout::JointFc => vec![],
            HeadLayout::ConvBranches => vec![(Xy, Conv), (Wh, Conv), (Theta, Fc)],
            HeadLayout::ConvBranchesThetaConv => vec![(Xy, Conv), (Wh, Conv), (Theta, Conv)],
            HeadLayout::StripXy => vec![(Xy, Strip), (Wh, Conv), (Theta, Fc)],
            HeadLayout::StripWh => vec![(Xy, Conv), (Wh, Strip), (Theta, Fc)],
            HeadLayout::StripTheta => vec![(Xy, Conv), (Wh, Conv), (Theta, Strip)],
            HeadLayout::StripLocSeparateThetaFc => vec![(Xywh, Strip), (Theta, Fc)],
            HeadLayout::StripLocSharedThetaFc => vec![(Xywh, Strip)],
            HeadLayout::StripLocThetaStrip => vec![(Xywh, Strip), (Theta, Strip)],
        }
    }

    /// θ comes from the shared classification FCs.
    pub fn theta_shared(self) -> bool {
        !self.branches().iter().any(|(t, _)| *t == BranchTarget::Theta)
    }

    /// Box deltas come from the shared classification FCs.
    pub fn loc_shared(self) -> bool {
        self == HeadLayout::JointFc
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadLayout::JointFc => "joint-fc",
            HeadLayout::ConvBranches => "conv-branches",
            HeadLayout::ConvBranchesThetaConv => "conv-branches-theta-conv",
            HeadLayout::StripXy => "strip-xy",
            HeadLayout::StripWh => "strip-wh",
            HeadLayout::StripTheta => "strip-theta",
            HeadLayout::StripLocSeparateThetaFc => "strip-loc-separate-theta-fc",
            HeadLayout::StripLocSharedThetaFc => "strip-loc-shared-theta-fc",
            HeadLayout::StripLocThetaStrip => "strip-loc-theta-strip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_LAYOUTS
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ALL_LAYOUTS.iter().map(|l| l.name()).collect();
                Error::Config(format!("unknown head layout {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layout_predicts_each_output_once() {
        for l in ALL_LAYOUTS {
            let b = l.branches();
            let loc: usize = b
                .iter()
                .filter(|(t, _)| *t != BranchTarget::Theta)
                .map(|(t, _)| t.width())
                .sum();
            let theta = b.iter().filter(|(t, _)| *t == BranchTarget::Theta).count();
            if l.loc_shared() {
                assert_eq!(loc, 0);
            } else {
                assert_eq!(loc, 4, "{l:?}");
            }
            assert_eq!(theta + l.theta_shared() as usize, 1, "{l:?}");
            assert_eq!(HeadLayout::parse(l.name()).unwrap(), l);
        }
        assert_eq!(HeadLayout::default(), HeadLayout::StripLocSharedThetaFc);
        assert!(HeadLayout::parse("nope").is_err());
    }
}
