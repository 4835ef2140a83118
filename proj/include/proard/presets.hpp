#pragma once

// Ready-made search spaces.

#include "proard/dynet/space.hpp"

namespace proard::presets {

using dynet::BlockKind;
using dynet::SearchSpace;
using dynet::StageSpec;

/// Five-stage dynamic ResNet on 3x32x32 inputs: depths {2,3,4}, width
/// {0.65,0.8,1.0}, expansion {0.2,0.25,0.35} in every stage. Too large to
/// instantiate at desk scale; used for counting and encoding.
inline SearchSpace resnet_space(std::size_t num_classes = 10) {
  SearchSpace s;
  s.kind = BlockKind::Conv;
  s.input = {3, 32, 32};
  s.num_classes = num_classes;
  s.stem_channels = 64;
  s.stem_kernel = 3;
  const std::size_t channels[] = {256, 512, 1024, 2048, 2048};
  const std::size_t strides[] = {1, 2, 2, 2, 1};
  for (int i = 0; i < 5; ++i) {
    StageSpec st;
    st.max_depth = 4;
    st.depth_choices = {2, 3, 4};
    st.width_choices = {0.65, 0.8, 1.0};
    st.expansion_choices = {0.2, 0.25, 0.35};
    st.kernel_choices = {3};
    st.stride = strides[i];
    st.channels = channels[i];
    st.expansion_base = channels[i];
    s.stages.push_back(st);
  }
  return s;
}

/// Desk-scale dense residual space: three stages, depths {1,2,3}, the same
/// width and expansion lists as the ResNet space.
inline SearchSpace desk_space(std::size_t num_classes = 10, Shape input = {1, 8, 8}) {
  SearchSpace s;
  s.kind = BlockKind::Dense;
  s.input = std::move(input);
  s.num_classes = num_classes;
  s.stem_channels = 32;
  const std::size_t channels[] = {16, 24, 32};
  for (std::size_t c : channels) {
    StageSpec st;
    st.max_depth = 3;
    st.depth_choices = {1, 2, 3};
    st.width_choices = {0.65, 0.8, 1.0};
    st.expansion_choices = {0.2, 0.25, 0.35};
    st.channels = c;
    st.expansion_base = 4 * c;
    s.stages.push_back(st);
  }
  return s;
}

/// Small convolutional space with elastic kernel size in place of width.
inline SearchSpace desk_kernel_space(std::size_t num_classes = 4) {
  SearchSpace s;
  s.kind = BlockKind::Conv;
  s.input = {1, 6, 6};
  s.num_classes = num_classes;
  s.stem_channels = 4;
  s.stem_kernel = 3;
  const std::size_t channels[] = {4, 6};
  const std::size_t strides[] = {1, 2};
  for (int i = 0; i < 2; ++i) {
    StageSpec st;
    st.max_depth = 2;
    st.depth_choices = {1, 2};
    st.width_choices = {1.0};
    st.expansion_choices = {0.5, 1.0};
    st.kernel_choices = {3, 5};
    st.stride = strides[i];
    st.channels = channels[i];
    st.expansion_base = channels[i];
    s.stages.push_back(st);
  }
  return s;
}

}  // namespace proard::presets
