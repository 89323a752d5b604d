#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mdm/motion.hpp"

namespace mdm {

enum class RenderFormat { Svg, Gif, Png };
RenderFormat render_format_from_string(const std::string& s);
std::string to_string(RenderFormat f);

// Orthographic stick figure. The camera is fixed over the whole clip so the
// figure travels across the frame.
struct RenderStyle {
  int width = 320;
  int height = 320;
  std::string view = "front";  // front (x, y), side (z, y), top (x, z)
  int trail = 4;               // earlier frames drawn behind, lighter = older
  int trail_stride = 3;        // frames between trail poses
  int delay_cs = 5;            // GIF frame delay in 1/100 s
  bool ground = true;
  bool contacts = true;        // mark planted feet
  bool from_rotations = true;  // FK on rotation channels; else position channels
  double margin = 0.08;        // fraction of the canvas

  void validate() const;
  nlohmann::json to_json() const;
  static RenderStyle from_json(const nlohmann::json& j);
};

struct Segment2 {
  Eigen::Vector2d a, b;
};

// Per frame: one segment per non-root joint (parent -> joint), in pixel
// coordinates with y pointing down.
std::vector<std::vector<Segment2>> project_bones(const JointPositions& positions, const Skeleton& skeleton,
                                                 const RenderStyle& style);

// Palette-indexed raster.
struct Canvas {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

// RGB triples; index 0 is the background.
const std::vector<std::array<std::uint8_t, 3>>& render_palette();

std::vector<Canvas> rasterize(const JointPositions& positions, const Skeleton& skeleton, const ContactMask* contacts,
                              const RenderStyle& style);

std::string encode_gif(const std::vector<Canvas>& frames, int delay_cs);
std::string encode_png(const Canvas& canvas);

// One animated SVG with a <g class="frame"> per motion frame.
std::string render_svg(const JointPositions& positions, const Skeleton& skeleton, const ContactMask* contacts,
                       const RenderStyle& style, double fps);

// gif/svg: one file at `out`; png: out is a directory of frame_NNNNN.png.
// Returns the files written.
std::vector<std::filesystem::path> render_motion(const MotionSequence& motion, const Skeleton& skeleton,
                                                 RenderFormat format, const RenderStyle& style,
                                                 const std::filesystem::path& out);

}  // namespace mdm
