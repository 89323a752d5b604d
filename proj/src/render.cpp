#include "mdm/render.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mdm/error.hpp"
#include "mdm/motion_io.hpp"

namespace mdm {

namespace {

constexpr std::uint8_t kBackground = 0;
constexpr std::uint8_t kBone = 1;
constexpr std::uint8_t kContact = 2;
constexpr std::uint8_t kGround = 3;
constexpr std::uint8_t kTrailFirst = 4;  // newest trail pose
constexpr std::uint8_t kTrailLast = 11;  // oldest shade

std::uint8_t trail_color(int age) { return static_cast<std::uint8_t>(std::min<int>(kTrailFirst + age - 1, kTrailLast)); }

std::string hex_color(std::uint8_t index) {
  const auto& c = render_palette()[index];
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

struct Projection {
  int u = 0, v = 1;  // world axes mapped to screen x and up
  double cu = 0, cv = 0, scale = 1;
  int width = 0, height = 0;

  Eigen::Vector2d operator()(const Vec3& p) const {
    return {width * 0.5 + (p[u] - cu) * scale, height * 0.5 - (p[v] - cv) * scale};
  }
};

Projection make_projection(const JointPositions& positions, const Skeleton& skeleton, const RenderStyle& style) {
  Projection pr;
  if (style.view == "front") {
    pr.u = 0, pr.v = 1;
  } else if (style.view == "side") {
    pr.u = 2, pr.v = 1;
  } else {
    pr.u = 0, pr.v = 2;
  }
  double lo_u = 1e300, hi_u = -1e300, lo_v = 1e300, hi_v = -1e300;
  for (const auto& p : positions.data) {
    if (!p.allFinite()) throw NumericError("render: non-finite joint positions");
    lo_u = std::min(lo_u, p[pr.u]);
    hi_u = std::max(hi_u, p[pr.u]);
    lo_v = std::min(lo_v, p[pr.v]);
    hi_v = std::max(hi_v, p[pr.v]);
  }
  if (style.ground && pr.v == 1) {
    lo_v = std::min(lo_v, skeleton.ground_height());
    hi_v = std::max(hi_v, skeleton.ground_height());
  }
  // At least half a metre of extent so a static pose is not blown up.
  const double ru = std::max(hi_u - lo_u, 0.5), rv = std::max(hi_v - lo_v, 0.5);
  pr.cu = 0.5 * (lo_u + hi_u);
  pr.cv = 0.5 * (lo_v + hi_v);
  pr.width = style.width;
  pr.height = style.height;
  pr.scale = std::min(style.width * (1.0 - 2.0 * style.margin) / ru, style.height * (1.0 - 2.0 * style.margin) / rv);
  return pr;
}

class Raster {
 public:
  explicit Raster(Canvas& c) : c_(c) {}

  void dot(int x, int y, int radius, std::uint8_t color) {
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (dx * dx + dy * dy <= radius * radius) put(x + dx, y + dy, color);
  }

  void square(int x, int y, int half, std::uint8_t color) {
    for (int dy = -half; dy <= half; ++dy)
      for (int dx = -half; dx <= half; ++dx) put(x + dx, y + dy, color);
  }

  // Bresenham with a round brush.
  void line(const Eigen::Vector2d& a, const Eigen::Vector2d& b, int radius, std::uint8_t color) {
    int x0 = static_cast<int>(std::lround(a.x())), y0 = static_cast<int>(std::lround(a.y()));
    const int x1 = static_cast<int>(std::lround(b.x())), y1 = static_cast<int>(std::lround(b.y()));
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      dot(x0, y0, radius, color);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

 private:
  void put(int x, int y, std::uint8_t color) {
    if (x < 0 || y < 0 || x >= c_.width || y >= c_.height) return;
    c_.pixels[static_cast<std::size_t>(y) * c_.width + x] = color;
  }
  Canvas& c_;
};

void append_u16(std::string& out, int v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void append_u32_be(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

class BitWriter {
 public:
  void write(int code, int bits) {
    acc_ |= static_cast<std::uint32_t>(code) << nbits_;
    nbits_ += bits;
    while (nbits_ >= 8) {
      bytes_.push_back(static_cast<char>(acc_ & 0xff));
      acc_ >>= 8;
      nbits_ -= 8;
    }
  }
  std::string finish() {
    if (nbits_ > 0) bytes_.push_back(static_cast<char>(acc_ & 0xff));
    acc_ = 0;
    nbits_ = 0;
    return std::move(bytes_);
  }

 private:
  std::uint32_t acc_ = 0;
  int nbits_ = 0;
  std::string bytes_;
};

constexpr int kGifMinCodeSize = 4;  // 16-colour palette

// Variable-width LZW as used by GIF; the dictionary is a trie over the
// 16-symbol alphabet and is reset with a clear code when it fills.
std::string lzw_encode(const std::vector<std::uint8_t>& pixels) {
  constexpr int kAlphabet = 1 << kGifMinCodeSize;
  constexpr int kClear = kAlphabet, kEnd = kAlphabet + 1, kMaxCode = 4095;
  std::vector<std::uint16_t> next(static_cast<std::size_t>(kMaxCode + 1) * kAlphabet, 0);
  BitWriter bw;
  int width = kGifMinCodeSize + 1;
  int max_code = kEnd;
  bw.write(kClear, width);
  int cur = -1;
  for (std::uint8_t px : pixels) {
    if (px >= kAlphabet) throw ValidationError("gif: palette index out of range");
    if (cur < 0) {
      cur = px;
      continue;
    }
    const std::size_t slot = static_cast<std::size_t>(cur) * kAlphabet + px;
    if (next[slot] != 0) {
      cur = next[slot];
      continue;
    }
    bw.write(cur, width);
    next[slot] = static_cast<std::uint16_t>(++max_code);
    if (max_code >= (1 << width)) ++width;
    if (max_code == kMaxCode) {
      bw.write(kClear, width);
      std::fill(next.begin(), next.end(), 0);
      width = kGifMinCodeSize + 1;
      max_code = kEnd;
    }
    cur = px;
  }
  if (cur >= 0) bw.write(cur, width);
  bw.write(kEnd, width);
  return bw.finish();
}

void png_chunk(std::string& out, const char* type, const std::string& data) {
  append_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  append_u32_be(out, static_cast<std::uint32_t>(
                         crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

JointPositions motion_positions(const MotionSequence& motion, const Skeleton& skeleton, const RenderStyle& style,
                                ContactMask& contacts) {
  const auto decoded = kinematics_from_features(skeleton, motion);
  contacts = decoded.contacts;
  return style.from_rotations ? fk_positions_from_features(skeleton, motion) : decoded.positions;
}

}  // namespace

RenderFormat render_format_from_string(const std::string& s) {
  if (s == "svg") return RenderFormat::Svg;
  if (s == "gif") return RenderFormat::Gif;
  if (s == "png") return RenderFormat::Png;
  throw ValidationError("render: unknown format '" + s + "' (svg, gif, png)");
}

std::string to_string(RenderFormat f) {
  switch (f) {
    case RenderFormat::Svg:
      return "svg";
    case RenderFormat::Gif:
      return "gif";
    case RenderFormat::Png:
      return "png";
  }
  return "?";
}

void RenderStyle::validate() const {
  if (width < 16 || height < 16 || width > 4096 || height > 4096)
    throw ValidationError("render: width and height must lie in [16, 4096]");
  if (view != "front" && view != "side" && view != "top") throw ValidationError("render: view must be front, side or top");
  if (trail < 0 || trail > 8) throw ValidationError("render: trail must lie in [0, 8]");
  if (trail_stride < 1) throw ValidationError("render: trail_stride must be >= 1");
  if (delay_cs < 1 || delay_cs > 65535) throw ValidationError("render: delay_cs must lie in [1, 65535]");
  if (!(margin >= 0.0 && margin < 0.5)) throw ValidationError("render: margin must lie in [0, 0.5)");
}

nlohmann::json RenderStyle::to_json() const {
  return {{"width", width},   {"height", height},     {"view", view},         {"trail", trail},
          {"trail_stride", trail_stride}, {"delay_cs", delay_cs}, {"ground", ground}, {"contacts", contacts},
          {"from_rotations", from_rotations}, {"margin", margin}};
}

RenderStyle RenderStyle::from_json(const nlohmann::json& j) {
  RenderStyle s;
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  s.view = j.value("view", s.view);
  s.trail = j.value("trail", s.trail);
  s.trail_stride = j.value("trail_stride", s.trail_stride);
  s.delay_cs = j.value("delay_cs", s.delay_cs);
  s.ground = j.value("ground", s.ground);
  s.contacts = j.value("contacts", s.contacts);
  s.from_rotations = j.value("from_rotations", s.from_rotations);
  s.margin = j.value("margin", s.margin);
  s.validate();
  return s;
}

const std::vector<std::array<std::uint8_t, 3>>& render_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette = {
      {250, 250, 250},  // background
      {25, 30, 45},     // bones
      {210, 45, 40},    // contact
      {175, 175, 175},  // ground
      {70, 95, 140},  {95, 118, 158}, {120, 140, 175}, {145, 162, 192},
      {170, 184, 208}, {195, 206, 224}, {215, 223, 236}, {232, 237, 245},
      {0, 0, 0},      {0, 0, 0},      {0, 0, 0},      {0, 0, 0},
  };
  return palette;
}

std::vector<std::vector<Segment2>> project_bones(const JointPositions& positions, const Skeleton& skeleton,
                                                 const RenderStyle& style) {
  style.validate();
  if (positions.joints != skeleton.num_joints()) throw ShapeError("render: joint count differs from skeleton");
  const auto pr = make_projection(positions, skeleton, style);
  std::vector<std::vector<Segment2>> out(static_cast<std::size_t>(positions.frames));
  for (int f = 0; f < positions.frames; ++f)
    for (int j = 0; j < skeleton.num_joints(); ++j)
      if (skeleton.parent(j) >= 0) out[f].push_back({pr(positions.at(f, skeleton.parent(j))), pr(positions.at(f, j))});
  return out;
}

std::vector<Canvas> rasterize(const JointPositions& positions, const Skeleton& skeleton, const ContactMask* contacts,
                              const RenderStyle& style) {
  const auto bones = project_bones(positions, skeleton, style);
  const auto pr = make_projection(positions, skeleton, style);
  if (contacts && (contacts->frames != positions.frames || contacts->feet != skeleton.num_feet()))
    throw ShapeError("render: contact mask shape differs");
  std::vector<Canvas> frames;
  for (int f = 0; f < positions.frames; ++f) {
    Canvas c{style.width, style.height,
             std::vector<std::uint8_t>(static_cast<std::size_t>(style.width) * style.height, kBackground)};
    Raster r(c);
    if (style.ground && pr.v == 1) {
      const double gy = pr(Vec3(0, skeleton.ground_height(), 0)).y();
      r.line({0.0, gy}, {style.width - 1.0, gy}, 0, kGround);
    }
    for (int age = style.trail; age >= 1; --age) {
      const int g = f - age * style.trail_stride;
      if (g < 0) continue;
      for (const auto& s : bones[g]) r.line(s.a, s.b, 1, trail_color(age));
    }
    for (const auto& s : bones[f]) r.line(s.a, s.b, 1, kBone);
    if (style.contacts && contacts)
      for (int k = 0; k < contacts->feet; ++k)
        if (contacts->at(f, k)) {
          const auto p = pr(positions.at(f, skeleton.foot_joints()[k]));
          r.square(static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())), 3, kContact);
        }
    frames.push_back(std::move(c));
  }
  return frames;
}

std::string encode_gif(const std::vector<Canvas>& frames, int delay_cs) {
  if (frames.empty()) throw ValidationError("gif: no frames");
  const int w = frames.front().width, h = frames.front().height;
  if (w < 1 || h < 1 || w > 65535 || h > 65535) throw ValidationError("gif: bad canvas size");
  std::string out = "GIF89a";
  append_u16(out, w);
  append_u16(out, h);
  out.push_back(static_cast<char>(0x80 | ((kGifMinCodeSize - 1) << 4) | (kGifMinCodeSize - 1)));
  out.push_back(0);  // background index
  out.push_back(0);  // aspect
  const auto& pal = render_palette();
  for (int i = 0; i < (1 << kGifMinCodeSize); ++i)
    for (int k = 0; k < 3; ++k) out.push_back(static_cast<char>(pal[i][k]));
  // loop forever
  out += std::string("\x21\xff\x0bNETSCAPE2.0\x03\x01\x00\x00\x00", 19);
  for (const auto& c : frames) {
    if (c.width != w || c.height != h || c.pixels.size() != static_cast<std::size_t>(w) * h)
      throw ShapeError("gif: frames differ in size");
    out += std::string("\x21\xf9\x04\x00", 4);
    append_u16(out, delay_cs);
    out.push_back(0);
    out.push_back(0);
    out.push_back(0x2c);
    append_u16(out, 0);
    append_u16(out, 0);
    append_u16(out, w);
    append_u16(out, h);
    out.push_back(0);
    out.push_back(static_cast<char>(kGifMinCodeSize));
    const auto data = lzw_encode(c.pixels);
    for (std::size_t p = 0; p < data.size(); p += 255) {
      const std::size_t n = std::min<std::size_t>(255, data.size() - p);
      out.push_back(static_cast<char>(n));
      out.append(data, p, n);
    }
    out.push_back(0);
  }
  out.push_back(0x3b);
  return out;
}

std::string encode_png(const Canvas& canvas) {
  if (canvas.width < 1 || canvas.height < 1 ||
      canvas.pixels.size() != static_cast<std::size_t>(canvas.width) * canvas.height)
    throw ShapeError("png: bad canvas");
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  append_u32_be(ihdr, static_cast<std::uint32_t>(canvas.width));
  append_u32_be(ihdr, static_cast<std::uint32_t>(canvas.height));
  ihdr += std::string("\x08\x03\x00\x00\x00", 5);  // 8-bit, palette
  png_chunk(out, "IHDR", ihdr);
  std::string plte;
  for (const auto& c : render_palette())
    for (auto v : c) plte.push_back(static_cast<char>(v));
  png_chunk(out, "PLTE", plte);

  std::string raw;
  raw.reserve(canvas.pixels.size() + canvas.height);
  for (int y = 0; y < canvas.height; ++y) {
    raw.push_back(0);  // filter: none
    raw.append(reinterpret_cast<const char*>(canvas.pixels.data()) + static_cast<std::size_t>(y) * canvas.width,
               canvas.width);
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string z(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw Error("png: zlib compression failed");
  z.resize(len);
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", "");
  return out;
}

std::string render_svg(const JointPositions& positions, const Skeleton& skeleton, const ContactMask* contacts,
                       const RenderStyle& style, double fps) {
  if (!(fps > 0.0)) throw ValidationError("render: fps must be positive");
  const auto bones = project_bones(positions, skeleton, style);
  const auto pr = make_projection(positions, skeleton, style);
  if (contacts && (contacts->frames != positions.frames || contacts->feet != skeleton.num_feet()))
    throw ShapeError("render: contact mask shape differs");
  const int n = positions.frames;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << style.width << "\" height=\"" << style.height
     << "\" viewBox=\"0 0 " << style.width << " " << style.height << "\">\n";
  os << "<rect width=\"" << style.width << "\" height=\"" << style.height << "\" fill=\"" << hex_color(kBackground)
     << "\"/>\n";
  if (style.ground && pr.v == 1) {
    const double gy = pr(Vec3(0, skeleton.ground_height(), 0)).y();
    os << "<line class=\"ground\" x1=\"0\" y1=\"" << fmt(gy) << "\" x2=\"" << style.width << "\" y2=\"" << fmt(gy)
       << "\" stroke=\"" << hex_color(kGround) << "\"/>\n";
  }
  const double dur = n / fps;
  const auto line = [&](const Segment2& s, const char* cls, std::uint8_t color) {
    os << "<line class=\"" << cls << "\" x1=\"" << fmt(s.a.x()) << "\" y1=\"" << fmt(s.a.y()) << "\" x2=\""
       << fmt(s.b.x()) << "\" y2=\"" << fmt(s.b.y()) << "\" stroke=\"" << hex_color(color)
       << "\" stroke-width=\"3\" stroke-linecap=\"round\"/>\n";
  };
  for (int f = 0; f < n; ++f) {
    os << "<g class=\"frame\" visibility=\"" << (f == 0 ? "visible" : "hidden") << "\">\n";
    if (n > 1) {
      const double t0 = static_cast<double>(f) / n, t1 = static_cast<double>(f + 1) / n;
      if (f == 0)
        os << "<animate attributeName=\"visibility\" values=\"visible;hidden\" keyTimes=\"0;" << t1;
      else
        os << "<animate attributeName=\"visibility\" values=\"hidden;visible;hidden\" keyTimes=\"0;" << t0 << ";" << t1;
      os << "\" dur=\"" << dur << "s\" calcMode=\"discrete\" repeatCount=\"indefinite\"/>\n";
    }
    for (int age = style.trail; age >= 1; --age) {
      const int g = f - age * style.trail_stride;
      if (g < 0) continue;
      for (const auto& s : bones[g]) line(s, "trail", trail_color(age));
    }
    for (const auto& s : bones[f]) line(s, "bone", kBone);
    if (style.contacts && contacts)
      for (int k = 0; k < contacts->feet; ++k)
        if (contacts->at(f, k)) {
          const auto p = pr(positions.at(f, skeleton.foot_joints()[k]));
          os << "<circle class=\"contact\" cx=\"" << fmt(p.x()) << "\" cy=\"" << fmt(p.y()) << "\" r=\"4\" fill=\""
             << hex_color(kContact) << "\"/>\n";
        }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> render_motion(const MotionSequence& motion, const Skeleton& skeleton,
                                                 RenderFormat format, const RenderStyle& style,
                                                 const std::filesystem::path& out) {
  style.validate();
  if (!motion.features.allFinite()) throw NumericError("render: non-finite motion features");
  ContactMask contacts;
  const auto positions = motion_positions(motion, skeleton, style, contacts);
  std::vector<std::filesystem::path> written;
  switch (format) {
    case RenderFormat::Svg:
      write_text_file(out, render_svg(positions, skeleton, &contacts, style, motion.fps));
      written.push_back(out);
      break;
    case RenderFormat::Gif:
      write_text_file(out, encode_gif(rasterize(positions, skeleton, &contacts, style), style.delay_cs));
      written.push_back(out);
      break;
    case RenderFormat::Png: {
      std::filesystem::create_directories(out);
      const auto frames = rasterize(positions, skeleton, &contacts, style);
      for (std::size_t f = 0; f < frames.size(); ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05zu.png", f);
        write_text_file(out / name, encode_png(frames[f]));
        written.push_back(out / name);
      }
      break;
    }
  }
  return written;
}

}  // namespace mdm
