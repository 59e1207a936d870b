#include "ddet/voc_xml.hpp"

#include "ddet/classes.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ddet {

void write_voc_xml(const std::string& path, const std::string& image_id, int width, int height,
                   const std::vector<LabeledBox>& labels) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_voc_xml: cannot open " + path);
    f << "<annotation>\n";
    f << "  <filename>" << image_id << ".png</filename>\n";
    f << "  <size>\n    <width>" << width << "</width>\n    <height>" << height
      << "</height>\n    <depth>3</depth>\n  </size>\n";
    for (const auto& lb : labels) {
        if (lb.class_id < 0 || lb.class_id >= kNumClasses)
            throw std::runtime_error("write_voc_xml: invalid class id " + std::to_string(lb.class_id));
        f << "  <object>\n";
        f << "    <name>" << kClassNames[lb.class_id] << "</name>\n";
        f << "    <bndbox>\n";
        f << "      <xmin>" << std::llround(lb.box.x1) << "</xmin>\n";
        f << "      <ymin>" << std::llround(lb.box.y1) << "</ymin>\n";
        f << "      <xmax>" << std::llround(lb.box.x2) << "</xmax>\n";
        f << "      <ymax>" << std::llround(lb.box.y2) << "</ymax>\n";
        f << "    </bndbox>\n";
        f << "  </object>\n";
    }
    f << "</annotation>\n";
    if (!f) throw std::runtime_error("write_voc_xml: write failed for " + path);
}

namespace {

// Returns the inner text of the first <tag>...</tag> inside [from, to) of
// doc, or npos pair if absent.
struct Span {
    size_t begin = std::string::npos, end = std::string::npos; // inner text range
    bool ok() const { return begin != std::string::npos; }
};

Span find_tag(const std::string& doc, const std::string& tag, size_t from, size_t to) {
    const std::string open = "<" + tag + ">", close = "</" + tag + ">";
    const size_t a = doc.find(open, from);
    if (a == std::string::npos || a >= to) return {};
    const size_t b = doc.find(close, a + open.size());
    if (b == std::string::npos || b > to) throw std::runtime_error("voc_xml: unclosed <" + tag + "> element");
    return {a + open.size(), b};
}

double parse_coord(const std::string& doc, const std::string& field, size_t from, size_t to, size_t obj_index) {
    const auto s = find_tag(doc, field, from, to);
    if (!s.ok())
        throw std::runtime_error("voc_xml: missing field <" + field + "> in object " + std::to_string(obj_index));
    const std::string text = doc.substr(s.begin, s.end - s.begin);
    try {
        size_t pos = 0;
        const double v = std::stod(text, &pos);
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos != text.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw std::runtime_error("voc_xml: invalid value for field <" + field + "> in object " +
                                 std::to_string(obj_index) + ": '" + text + "'");
    }
}

} // namespace

std::vector<LabeledBox> read_voc_xml(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_voc_xml: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string doc = ss.str();
    if (doc.find("<annotation>") == std::string::npos)
        throw std::runtime_error("voc_xml: missing <annotation> root in " + path);

    std::vector<LabeledBox> labels;
    size_t cursor = 0, obj_index = 0;
    while (true) {
        const auto obj = find_tag(doc, "object", cursor, doc.size());
        if (!obj.ok()) break;
        ++obj_index;
        const auto name = find_tag(doc, "name", obj.begin, obj.end);
        if (!name.ok())
            throw std::runtime_error("voc_xml: missing field <name> in object " + std::to_string(obj_index));
        const std::string cls = doc.substr(name.begin, name.end - name.begin);
        const int class_id = class_id_from_name(cls);
        if (class_id < 0) throw std::runtime_error("voc_xml: unknown class '" + cls + "'");
        const auto bb = find_tag(doc, "bndbox", obj.begin, obj.end);
        if (!bb.ok())
            throw std::runtime_error("voc_xml: missing field <bndbox> in object " + std::to_string(obj_index));
        LabeledBox lb;
        lb.class_id = class_id;
        lb.box.x1 = parse_coord(doc, "xmin", bb.begin, bb.end, obj_index);
        lb.box.y1 = parse_coord(doc, "ymin", bb.begin, bb.end, obj_index);
        lb.box.x2 = parse_coord(doc, "xmax", bb.begin, bb.end, obj_index);
        lb.box.y2 = parse_coord(doc, "ymax", bb.begin, bb.end, obj_index);
        if (lb.box.x1 > lb.box.x2)
            throw std::runtime_error("voc_xml: xmin > xmax in object " + std::to_string(obj_index));
        if (lb.box.y1 > lb.box.y2)
            throw std::runtime_error("voc_xml: ymin > ymax in object " + std::to_string(obj_index));
        labels.push_back(lb);
        cursor = obj.end;
    }
    return labels;
}

} // namespace ddet
