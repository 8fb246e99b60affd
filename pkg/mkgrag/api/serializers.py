from rest_framework import serializers


def format_errors(errors, prefix: str = "") -> str:
    """Flattens DRF validation errors into a single reason string."""
    if isinstance(errors, dict):
        reasons = []
        for field, value in errors.items():
            name = prefix if field == "non_field_errors" else f"{prefix}{field}"
            reasons.append(format_errors(value, f"{name}." if name else ""))
        return "; ".join(reason for reason in reasons if reason)
    if isinstance(errors, list):
        reasons = []
        for index, value in enumerate(errors):
            if isinstance(value, (dict, list)):
                reasons.append(format_errors(value, f"{prefix}{index}."))
            else:
                label = prefix.rstrip(".")
                reasons.append(f"{label}: {value}" if label else str(value))
        return "; ".join(reason for reason in reasons if reason)
    return str(errors)


# Corpus file


class ImageAssetSerializer(serializers.Serializer):
    image_id = serializers.CharField()
    uri = serializers.CharField(allow_blank=True, default="")
    caption = serializers.CharField(
        allow_blank=True, allow_null=True, required=False, default=None
    )
    scene_graph = serializers.CharField(
        allow_blank=True, allow_null=True, required=False, default=None
    )


class SectionSerializer(serializers.Serializer):
    heading = serializers.CharField(allow_blank=True, default="", trim_whitespace=False)
    text = serializers.CharField(trim_whitespace=True)
    image_ids = serializers.ListField(
        child=serializers.CharField(), required=False, default=list
    )


class DocumentSerializer(serializers.Serializer):
    doc_id = serializers.CharField()
    title = serializers.CharField(allow_blank=True, default="")
    sections = serializers.ListField(child=SectionSerializer(), allow_empty=True)
    images = serializers.ListField(
        child=ImageAssetSerializer(), required=False, default=list
    )

    def validate(self, attrs):
        image_ids = [image["image_id"] for image in attrs["images"]]
        duplicates = sorted({i for i in image_ids if image_ids.count(i) > 1})
        if duplicates:
            raise serializers.ValidationError(
                f"duplicate image id: {', '.join(duplicates)}"
            )
        known = set(image_ids)
        for section in attrs["sections"]:
            for image_id in section["image_ids"]:
                if image_id not in known:
                    raise serializers.ValidationError(
                        f"dangling image ref: {image_id}"
                    )
        return attrs


# Scene graph sidecar


class VisualObjectSerializer(serializers.Serializer):
    id = serializers.CharField()
    category = serializers.CharField()
    bbox = serializers.ListField(
        child=serializers.FloatField(), min_length=4, max_length=4
    )


class VisualRelationSerializer(serializers.Serializer):
    id = serializers.CharField()
    subject = serializers.CharField()
    predicate = serializers.CharField()
    object = serializers.CharField()


# Backend wire contract


class PartSerializer(serializers.Serializer):
    text = serializers.CharField(required=False, trim_whitespace=False, allow_blank=True)
    image = serializers.CharField(required=False)

    def validate(self, attrs):
        if ("text" in attrs) == ("image" in attrs):
            raise serializers.ValidationError("part needs exactly one of text, image")
        return attrs


class ChatRequestSerializer(serializers.Serializer):
    template_id = serializers.CharField()
    parts = serializers.ListField(child=PartSerializer(), allow_empty=False)
    temperature = serializers.FloatField(default=0.0)
    seed = serializers.IntegerField(default=0)


class EmbeddingRequestSerializer(serializers.Serializer):
    role = serializers.ChoiceField(choices=["query", "evidence"])
    parts = serializers.ListField(child=PartSerializer(), allow_empty=False)
    dim = serializers.IntegerField(required=False, allow_null=True, min_value=8)


# Evaluation dataset


class DatasetRecordSerializer(serializers.Serializer):
    question = serializers.CharField()
    image_id = serializers.CharField(allow_blank=True, default="")
    image_uri = serializers.CharField(allow_blank=True, default="")
    gold_doc_id = serializers.CharField()
    gold_answers = serializers.ListField(
        child=serializers.CharField(), allow_empty=False
    )
    query_id = serializers.CharField(allow_blank=True, default="")
    split = serializers.CharField(allow_null=True, required=False, default=None)
    gold_elements = serializers.ListField(
        child=serializers.CharField(), required=False, default=list
    )
    gold_segment_ids = serializers.ListField(
        child=serializers.CharField(), required=False, default=list
    )
