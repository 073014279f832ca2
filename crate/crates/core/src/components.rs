//! 4-connected component labelling over a pixel predicate.

/// `labels[i]` is 0 outside the predicate, otherwise `k` for the `k`-th
/// component (1-based) in raster-scan order of first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub areas: Vec<usize>,
}

impl Components {
    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn largest(&self) -> usize {
        self.areas.iter().copied().max().unwrap_or(0)
    }

    pub fn total_area(&self) -> usize {
        self.areas.iter().sum()
    }
}

pub fn label_components(width: usize, height: usize, member: impl Fn(usize) -> bool) -> Components {
    let mut labels = vec![0u32; width * height];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..width * height {
        if labels[start] != 0 || !member(start) {
            continue;
        }
        let id = areas.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if labels[j] == 0 && member(j) {
                    labels[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        areas.push(area);
    }
    Components {
        width,
        height,
        labels,
        areas,
    }
}
