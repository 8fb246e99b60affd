import logging

from mkgrag.services.backends import ChatBackend, ChatRequest, Part
from mkgrag.services.records import render_template
from mkgrag.services.retrieval import AssembledContext, Query

logger = logging.getLogger(__name__)


def render_answer_prompt(query: Query, ctx: AssembledContext):
    image = query.image
    return render_template(
        "answer",
        {
            "IMAGE": Part.of_image(image.uri or image.image_id) if image else "",
            "QUESTION": query.question.strip(),
            "GRAPH_CONTEXT": ctx.graph_block,
            "SEGMENT_CONTEXT": ctx.segment_block,
        },
    )


def generate_answer(query: Query, ctx: AssembledContext, backend: ChatBackend, seed: int = 0) -> str:
    prompt = render_answer_prompt(query, ctx)
    answer = backend.chat_complete(
        ChatRequest(template_id="answer", parts=tuple(prompt.parts), seed=seed)
    )
    logger.debug(f"Answered '{query.question}' with '{answer.strip()}'")
    return answer.strip()
